"""Reverse-mode automatic differentiation over numpy arrays.

The op set is closed and minimal: exactly what the encoder-decoder and
contrastive models need. Broadcasting is restricted to leading batch
dimensions (the smaller operand's shape must equal the trailing extents
of the larger one); this keeps every backward rule auditable.

Training runs in float32. Passing float64 arrays everywhere gives the
double-precision verification path used by the finite-difference
gradient checks (`gradient_check`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyLossError, ShapeError

DEFAULT_DTYPE = np.float32

# GELU tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715

# Additive-mask surrogate for -infinity; exp(x - 1e9) underflows to exactly
# 0.0 in f32 and f64, which is what the bitwise causality invariant needs.
NEG_INF = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure-inference forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-d array plus an optional position in the backward graph.

    `data` is never mutated by ops; `grad` is populated by `backward()`
    for every tensor that participates in the graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_grad_borrowed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._grad_borrowed = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- graph plumbing ---------------------------------------------------

    @property
    def _in_graph(self) -> bool:
        return self.requires_grad or self._backward is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every graph tensor."""
        if self.data.size != 1:
            raise ShapeError("backward() is defined for scalar outputs only")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Build a result tensor, recording the edge only when a parent is live."""
    out = Tensor(data)
    if _grad_enabled and any(p._in_graph for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First delivery borrows the caller's buffer; a second delivery
    # replaces it with a fresh sum. A borrowed buffer is never mutated,
    # so fan-out ops may hand the same array to several parents.
    if not t._in_graph:
        return
    if t.grad is None:
        t.grad = g
        t._grad_borrowed = True
    elif t._grad_borrowed:
        t.grad = t.grad + g
        t._grad_borrowed = False
    else:
        t.grad += g


def _check_trailing(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> None:
    """Leading-batch broadcast rule: smaller shape == trailing dims of larger."""
    k = min(len(a_shape), len(b_shape))
    if a_shape[len(a_shape) - k:] != b_shape[len(b_shape) - k:]:
        raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast "
                         "over leading batch dims")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _node(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have >= 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    k = min(len(ba), len(bb))
    if k and ba[len(ba) - k:] != bb[len(bb) - k:]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # flatten leading dims into one gemm; the weight gradient then
        # reduces over the batch inside BLAS instead of per-slice
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            _accum(a, (g2 @ b.data.T).reshape(a.shape))
            _accum(b, a2.T @ g2)

        return _node(out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _node(out, (a, b), backward)


# -- shape manipulation ---------------------------------------------------


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), backward)


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape

    def backward(g):
        _accum(a, g.reshape(orig))

    return _node(a.data.reshape(tuple(shape)), (a,), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [
        _as_tensor(t) for t in tensors
    ]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + size)
            _accum(t, g[tuple(idx)])
            start += size

    return _node(out, tuple(tensors), backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (int/slice/ellipsis) indexing; no repeated-index keys."""
    out = a.data[key]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        _accum(a, buf)

    return _node(out, (a,), backward)


# -- reductions -----------------------------------------------------------


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node(out, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(g):
        scaled = g / n
        if axis is None:
            _accum(a, np.broadcast_to(scaled, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(scaled, axis), a.shape).copy())

    return _node(out, (a,), backward)


# -- neural-net ops -------------------------------------------------------


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` ([V, D]) at integer `ids` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")
    out = table.data[ids]

    def backward(g):
        if not table._in_graph:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        elif table._grad_borrowed:
            table.grad = table.grad.copy()
        table._grad_borrowed = False
        np.add.at(table.grad, ids, g)

    return _node(out, (table,), backward)


def layer_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale-only layer normalization over the last axis (no bias term)."""
    if scale.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm scale {scale.shape} vs width {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * scale.data

    def backward(g):
        dxhat = g * scale.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dxhat -= m1
        dxhat -= xhat * m2
        dxhat *= inv
        _accum(x, dxhat)
        _accum(scale, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))

    return _node(out, (x, scale), backward)


def gelu(x: Tensor) -> Tensor:
    # multiplies instead of ** (np.power hits slow libm paths on tiny
    # values) and in-place temporaries: this op runs on the widest
    # activations in the net
    d = x.data
    u = d * d
    u *= GELU_A
    u += 1.0
    u *= d
    u *= GELU_C
    t = np.tanh(u)
    out = t + 1.0
    out *= d
    out *= 0.5

    def backward(g):
        du = d * d
        du *= 3.0 * GELU_A
        du += 1.0
        du *= GELU_C
        dt = t * t
        np.subtract(1.0, dt, out=dt)
        dt *= du
        dt *= d
        dt += 1.0 + t
        dt *= 0.5
        dt *= g
        _accum(x, dt)

    return _node(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        d = g - dot
        d *= out
        _accum(x, d)

    return _node(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Train-mode dropout: zero with probability `rate`, rescale the rest."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate {rate} outside [0, 1)")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    out = x.data * keep * scale

    def backward(g):
        _accum(x, g * keep * scale)

    return _node(out, (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize rows (last axis) to unit L2 norm."""
    nrm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    out = x.data / nrm

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(x, (g - out * dot) / nrm)

    return _node(out, (x,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """Masked scaled-dot-product attention core.

    q: [.., N, Dh], k/v: [.., M, Dh]; mask is additive with entries in
    {0, NEG_INF} and must broadcast (leading dims) against [.., N, M].
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k head dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k/v lengths differ: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    # scaling q (the smaller array) before the score product
    scores = matmul(mul(q, _as_tensor(scale, q.dtype)), swap_last2(k))
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax(scores, axis=-1), v)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  weight_mask: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions with weight 1.

    logits: [N, V]; targets: int[N]; weight_mask: {0,1}[N]. Gradient flows
    only through weighted positions.
    """
    targets = np.asarray(targets)
    w = np.asarray(weight_mask).astype(logits.dtype)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy wants [N, V] logits, got {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,) or w.shape != (n,):
        raise ShapeError("targets/weight_mask must be length N")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError("target id out of range")
    total = w.sum()
    if total == 0:
        raise EmptyLossError("all positions carry zero loss weight")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = logits.data - m - np.log(z)
    rows = np.arange(n)
    out = -(w * logp[rows, targets]).sum() / total

    def backward(g):
        p = e / z
        d = p * w[:, None]
        d[rows, targets] -= w
        _accum(logits, (g / total) * d)

    return _node(np.asarray(out, dtype=logits.dtype), (logits,), backward)


# -- verification ---------------------------------------------------------


def gradient_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps Tensors to a scalar Tensor; `inputs` are float64 arrays. The
    numeric side only ever calls the forward path. The denominator is
    floored at 1e-3 so that finite-difference noise near gradient zero
    crossings does not register as error.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
               for x in inputs]
    f(*tensors).backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(*tensors).data)
            flat[i] = orig - step
            lo = float(f(*tensors).data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        diff = np.abs(analytic - numeric)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        rel = diff / denom
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
