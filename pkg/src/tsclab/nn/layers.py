"""Dense, normalization, attention and recurrent layers on the autodiff engine."""

from __future__ import annotations

import logging
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)


class Module:
    """Holds parameters and child modules in declaration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    """y = x W + b with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = ad.parameter(rng.uniform(-bound, bound, size=(n_out,))) if bias else None

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            y = ad.matmul(ad.reshape(x, (1, -1)), self.weight)
            y = ad.reshape(y, (-1,))
        else:
            y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention of one query against a masked key set.

    ``query``: (B, d); ``keys``/``values``: (B, K, d); ``mask``: (B, K) bool.
    Returns the concatenated per-head aggregates (B, d) and weights (B, H, K).
    Rows whose keys are all masked aggregate to zero with zero weights.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide the model dimension ({dim})")
        self.dim, self.heads, self.d_head = dim, heads, dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)

    def __call__(self, query, keys, values, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        query, keys = ad.as_tensor(query), ad.as_tensor(keys)
        b, n_keys, _ = keys.shape
        h, dh = self.heads, self.d_head
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (b, n_keys):
            raise ValueError(f"mask shape {mask.shape} != {(b, n_keys)}")
        if not mask.any(axis=1).all():
            log.debug("attention over an empty key set: %d isolated rows",
                      int((~mask.any(axis=1)).sum()))
        q = self.q(query).reshape(b, h, 1, dh)
        k = self.k(keys).reshape(b, n_keys, h, dh).swapaxes(1, 2)  # (B, H, K, dh)
        v = self.v(values).reshape(b, n_keys, h, dh).swapaxes(1, 2)
        scores = ad.matmul(q, k.swapaxes(2, 3)) * (1.0 / np.sqrt(dh))  # (B, H, 1, K)
        weights = ad.masked_softmax(scores, mask[:, None, None, :])
        out = ad.matmul(weights, v)  # (B, H, 1, dh)
        return out.reshape(b, h * dh), weights.reshape(b, h, n_keys)


class GRUCell(Module):
    """h' = (1 - z) * n + z * h with reset gate applied to the recurrent candidate term."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.x_proj = Linear(n_in, 3 * hidden, rng)
        self.h_proj = Linear(hidden, 3 * hidden, rng)

    def input_part(self, x) -> Tensor:
        """Input projections for all three gates; can be precomputed for a whole sequence."""
        return self.x_proj(x)

    def step(self, xp: Tensor, h) -> Tensor:
        """One recurrence step from a precomputed input projection ``xp``."""
        return ad.gru_cell(xp, h, self.h_proj.weight, self.h_proj.bias)

    def step_composed(self, xp: Tensor, h) -> Tensor:
        """Same step built from elementwise primitives (reference for the fused op)."""
        h = ad.as_tensor(h)
        n = self.hidden
        hp = self.h_proj(h)
        xz, xr, xn = xp[..., :n], xp[..., n:2 * n], xp[..., 2 * n:]
        hz, hr, hn = hp[..., :n], hp[..., n:2 * n], hp[..., 2 * n:]
        z = ad.sigmoid(xz + hz)
        r = ad.sigmoid(xr + hr)
        cand = ad.tanh(xn + r * hn)
        return cand + z * (h - cand)

    def __call__(self, x, h) -> Tensor:
        return self.step(self.input_part(x), h)
