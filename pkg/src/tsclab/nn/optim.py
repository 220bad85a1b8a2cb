"""Adam with bias correction and global gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(FloatingPointError):
    """Raised instead of applying an update that contains NaN or Inf."""


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> list[np.ndarray]:
    """Return updated parameters; ``state`` moments and step count are advanced in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for g in grads:
        if not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient; update aborted")
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.shape}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = state.m[k] / c1 if c1 > 0 else state.m[k]
        v_hat = state.v[k] / c2 if c2 > 0 else state.v[k]
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * scale for g in grads]
    return grads, total


@dataclass
class Adam:
    """Optimizer bound to a fixed list of parameter tensors."""

    params: list[Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float = 0.0
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad``; returns the pre-clip grad norm."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for g in grads:
            if not np.isfinite(g).all():
                raise NonFiniteGradient("non-finite gradient; update aborted")
        grads, norm = clip_grad_norm(grads, self.max_grad_norm)
        new = adam_update([p.data for p in self.params], grads, self.state,
                          self.lr, self.beta1, self.beta2, self.eps)
        for p, arr in zip(self.params, new):
            p.data = arr
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.state.t)}
        for k, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m{k}"] = m.copy()
            out[f"v{k}"] = v.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        n = len(self.params)
        self.state = AdamState([np.array(arrays[f"m{k}"]) for k in range(n)],
                               [np.array(arrays[f"v{k}"]) for k in range(n)],
                               int(arrays["t"]))
