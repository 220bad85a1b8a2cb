"""Small reverse-mode automatic differentiation engine on numpy float64 arrays.

Each op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse topological
order and accumulates into ``.grad`` of leaf tensors that require gradients.
The graph is kept after ``backward`` so calling it twice accumulates twice.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (rollouts and evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class GraphError(RuntimeError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class _IndexedGrad:
    """Gradient that is zero except at ``index``; added into the parent buffer in place."""

    __slots__ = ("index", "values", "basic")

    def __init__(self, index, values: np.ndarray, basic: bool):
        self.index, self.values, self.basic = index, values, basic

    def add_into(self, buf: np.ndarray) -> None:
        if self.basic:
            buf[self.index] += self.values
        else:
            np.add.at(buf, self.index, self.values)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basics ----------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph -----------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise GraphError("backward through a tensor that is not attached to any parameter")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # id -> [gradient buffer, buffer owned by us (safe to update in place)]
        grads: dict[int, list] = {id(self): [np.asarray(grad, dtype=np.float64), False]}
        for node in reversed(order):
            entry = grads.pop(id(node), None)
            if entry is None:
                continue
            g = entry[0]
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                slot = grads.get(id(p))
                if isinstance(pg, _IndexedGrad):
                    if slot is None:
                        slot = grads[id(p)] = [np.zeros(p.shape), True]
                    elif not slot[1]:
                        slot[0] = slot[0].copy()
                        slot[1] = True
                    pg.add_into(slot[0])
                elif slot is None:
                    grads[id(p)] = [pg, False]
                elif slot[1]:
                    slot[0] += pg
                else:
                    slot[0] = slot[0] + pg
                    slot[1] = True

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape),
                            _unbroadcast(g * ~take_a, b.shape)))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# -- reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(idx)

    return _make(a.data[idx], (a,), lambda g: (_IndexedGrad(idx, g, basic),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)
    return _make(np.stack([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.take(g, k, axis=axis) for k in range(n)))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics for ndim >= 2 operands."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            # shared weight matrix: fold every leading axis into one product
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(ad @ bd, (a, b), back)


# -- fused normalization / probability ops ------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def back(g):
        gx_hat = g * gamma.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), back)


def masked_softmax(x, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` over entries where ``mask`` is true.

    Masked entries get weight exactly 0 and no gradient. A slice with every
    entry masked yields all zeros (used for agents without neighbours).
    """
    x = as_tensor(x)
    xd = x.data
    if mask is None:
        keep = np.ones(xd.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    z = np.where(keep, xd, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(keep, np.exp(np.where(keep, xd, 0.0) - zmax), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom != 0)  # NaN rows stay NaN

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), back)


def softmax(x, axis: int = -1) -> Tensor:
    return masked_softmax(x, None, axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def gather_last(x, index: np.ndarray) -> Tensor:
    """``x[..., index]`` picking one entry per leading position."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    lead = np.indices(index.shape)
    idx = tuple(lead) + (index,)
    return getitem(x, idx)


def gru_cell(xp, h, weight, bias) -> Tensor:
    """Fused GRU update from a precomputed input projection.

    ``xp`` (B, 3n) holds the input parts of the update, reset and candidate
    pre-activations; ``h @ weight + bias`` gives the recurrent parts. Same
    math as composing sigmoid/tanh/mul primitives, in one graph node.
    """
    xp, h, weight, bias = as_tensor(xp), as_tensor(h), as_tensor(weight), as_tensor(bias)
    hd, wd = h.data, weight.data
    n = hd.shape[-1]
    hp = hd @ wd + bias.data
    xd = xp.data
    z = 0.5 * (1.0 + np.tanh(0.5 * (xd[..., :n] + hp[..., :n])))
    r = 0.5 * (1.0 + np.tanh(0.5 * (xd[..., n:2 * n] + hp[..., n:2 * n])))
    hn = hp[..., 2 * n:]
    c = np.tanh(xd[..., 2 * n:] + r * hn)
    out = c + z * (hd - c)

    def back(g):
        gz = g * (hd - c) * z * (1.0 - z)
        gc = g * (1.0 - z) * (1.0 - c * c)
        gr = gc * hn * r * (1.0 - r)
        g_xp = np.concatenate([gz, gr, gc], axis=-1)
        g_hp = np.concatenate([gz, gr, gc * r], axis=-1)
        gh = g * z + g_hp @ wd.T
        gw = hd.reshape(-1, n).T @ g_hp.reshape(-1, 3 * n)
        gb = g_hp.reshape(-1, 3 * n).sum(axis=0)
        return g_xp, gh, gw, gb

    return _make(out, (xp, h, weight, bias), back)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
