"""Small dense reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result records its parents and a closure mapping the upstream gradient to one
gradient per parent. :func:`backprop` walks the graph in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels

_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            raise TypeError("division only supported by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents) and grad_enabled():
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes only where the input is strictly inside."""
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.sum(x.data, axis=axis), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _basic_index(idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along axis 0 with an integer index array (duplicates allowed)."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward)


def take_components(x: Tensor, comp: np.ndarray) -> Tensor:
    """x[M, C, ...] -> x[m, comp[m], ...]."""
    comp = np.asarray(comp, dtype=np.intp)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, comp] = g
        return (out,)

    return _make(x.data[rows, comp], (x,), backward)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """np.repeat along axis 0; each row is repeated n times consecutively."""
    shape = x.shape

    def backward(g):
        return (g.reshape((shape[0], n) + shape[1:]).sum(axis=1),)

    return _make(np.repeat(x.data, n, axis=0), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for a[..., n, k] and b[k, m] or b[..., k, m] (same leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = ad @ bd

    def backward(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward)


_ACTIVATIONS = ("identity", "tanh", "relu")


def dense(x: Tensor, W: Tensor, b: Tensor, act: str = "identity") -> Tensor:
    """act(x @ W + b) over the last axis of x; one fused graph node."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if act not in _ACTIVATIONS:
        raise ValueError(f"unsupported activation {act!r}; expected one of {_ACTIVATIONS}")
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ValueError(f"dense: weight {W.shape} and bias {b.shape} do not conform")
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"dense: input last dim {x.shape[-1]} != weight rows {W.shape[0]}")
    xd = x.data.reshape(-1, W.shape[0])
    z = xd @ W.data + b.data
    if act == "tanh":
        y = np.tanh(z)
    elif act == "relu":
        y = np.maximum(z, 0.0)
    else:
        y = z
    out_shape = x.shape[:-1] + (W.shape[1],)

    def backward(g):
        g = g.reshape(-1, W.shape[1])
        if act == "tanh":
            g = g * (1.0 - y * y)
        elif act == "relu":
            g = g * (z > 0)
        gx = (g @ W.data.T).reshape(x.shape)
        return gx, xd.T @ g, g.sum(axis=0)

    return _make(y.reshape(out_shape), (x, W, b), backward)


# ---------------------------------------------------------------- normalizers


def log_sum_exp(v: Tensor) -> Tensor:
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ValueError("log_sum_exp needs a non-empty last axis")
    vd = v.data
    m = vd.max(axis=-1, keepdims=True)
    e = np.exp(vd - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def backward(g):
        return (g[..., None] * (e / s),)

    return _make(out, (v,), backward)


def softmax(v: Tensor) -> Tensor:
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ValueError("softmax needs a non-empty last axis")
    vd = v.data
    e = np.exp(vd - vd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (v,), backward)


# ---------------------------------------------------------------- attention


def causal_self_attention(tokens: Tensor, params: Mapping[str, Tensor], max_len: int | None = None,
                          last_only: bool = False) -> Tensor:
    """Single-head causal self-attention with learned positions and a residual.

    ``params`` holds ``pos`` [max_len, D] and ``wq``, ``wk``, ``wv``, ``wo`` [D, D].
    With ``last_only`` only the final position is computed (shape [B, D]); it
    equals the last row of the full output since that row sees the whole prefix.
    """
    B, L, D = tokens.shape
    pos = params["pos"]
    cap = pos.shape[0] if max_len is None else min(max_len, pos.shape[0])
    if L > cap:
        raise ValueError(f"sequence length {L} exceeds max context {cap}")
    x = add(tokens, pos[:L])
    scale = 1.0 / math.sqrt(D)
    k = matmul(x, params["wk"])
    v = matmul(x, params["wv"])
    if last_only:
        x_last = x[:, L - 1, :]
        q = matmul(reshape(x_last, (B, 1, D)), params["wq"])
        scores = mul(matmul(q, transpose(k, (0, 2, 1))), scale)  # B,1,L
        att = softmax(scores)
        ctx = reshape(matmul(att, v), (B, D))
        return add(x_last, matmul(ctx, params["wo"]))
    q = matmul(x, params["wq"])
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), scale)
    scores = add(scores, Tensor(_causal_mask(L)))
    att = softmax(scores)
    return add(x, matmul(matmul(att, v), params["wo"]))


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(L: int) -> np.ndarray:
    if L not in _MASKS:
        m = np.zeros((L, L))
        m[np.triu_indices(L, 1)] = -np.inf
        _MASKS[L] = m
    return _MASKS[L]


# ---------------------------------------------------------------- gmm density


def gmm_log_prob(logits: Tensor, means: Tensor, log_scales: Tensor, x: Tensor) -> Tensor:
    """Row-wise log density of a diagonal Gaussian mixture.

    logits [M, C], means/log_scales [M, C, A], x [M, A] -> [M]. Differentiable
    in all four inputs (x included, for pathwise samples).
    """
    logits, means, log_scales, x = map(as_tensor, (logits, means, log_scales, x))
    M, C = logits.shape
    if means.shape != (M, C, x.shape[-1]) or log_scales.shape != means.shape or x.shape[0] != M:
        raise ValueError(
            f"gmm_log_prob shapes disagree: logits {logits.shape}, means {means.shape}, "
            f"log_scales {log_scales.shape}, x {x.shape}")
    lp, resp = kernels.gmm_logpdf(logits.data, means.data, log_scales.data, x.data)

    def backward(g):
        return kernels.gmm_logpdf_grad(logits.data, means.data, log_scales.data, x.data, resp, g)

    return _make(lp, (logits, means, log_scales, x), backward)


# ---------------------------------------------------------------- backprop


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backprop(loss: Tensor, params=None):
    """Gradients of a scalar ``loss``.

    ``params`` may be a mapping name -> Tensor (returns name -> array), a
    sequence of Tensors (returns a list), or None (returns {leaf: array} for
    every reachable leaf). Unreachable parameters get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"loss is not finite: {float(loss.data)}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo(loss)):
            g = grads.get(id(node))
            if node._backward is None:
                leaves[id(node)] = node
                continue
            grads.pop(id(node), None)
            if g is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return {leaves[k]: grads.get(k, np.zeros(leaves[k].shape)) for k in leaves}
    if isinstance(params, Mapping):
        return {name: _grad_for(t, grads) for name, t in params.items()}
    return [_grad_for(t, grads) for t in params]


def _grad_for(t: Tensor, grads: dict[int, np.ndarray]) -> np.ndarray:
    g = grads.get(id(t))
    if g is None:
        return np.zeros(t.shape)
    return np.broadcast_to(g, t.shape).copy() if g.shape != t.shape else g


# ---------------------------------------------------------------- verification


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
                      eps: float = 1e-5, coords: int | None = None,
                      rng: np.random.Generator | None = None, order: int = 2) -> float:
    """Max relative error between backprop and central differences.

    ``f`` must close over ``params`` and be deterministic (freeze any sampling
    noise by reseeding inside ``f``). ``coords`` limits the check to a random
    subset of coordinates per tensor. ``order`` 4 uses the five-point stencil,
    which tolerates a larger ``eps`` and so loses less to cancellation on tiny
    gradients.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    loss = f()
    analytic = backprop(loss, tensors)
    offsets = (1.0, -1.0) if order == 2 else (1.0, -1.0, 2.0, -2.0)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=coords, replace=False)
        with no_grad():
            for i in idx:
                orig = flat[i]
                vals = []
                for k in offsets:
                    flat[i] = orig + k * eps
                    vals.append(float(f().data))
                flat[i] = orig
                if not all(math.isfinite(v) for v in vals):
                    raise FloatingPointError("objective became non-finite during finite differences")
                if order == 2:
                    num = (vals[0] - vals[1]) / (2.0 * eps)
                else:
                    num = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * eps)
                ana = gflat[i]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
