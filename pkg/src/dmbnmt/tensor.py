"""Dense tensors with tape-free reverse-mode automatic differentiation.

Every op that touches a tensor with ``requires_grad`` records its inputs and a
backward closure on the output.  :func:`backward` walks the reachable nodes in
reverse creation order, so gradients of tensors that feed several consumers
accumulate additively before they are propagated further.

Values are numpy arrays of rank 0 to 3.  The default dtype is float32;
:func:`precision` switches newly created tensors to float64, which is only
meant for tightening finite-difference checks.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "tensor",
    "zeros",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "precision",
    "default_dtype",
    "count_mult_adds",
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "softplus",
    "exp",
    "log",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "cross_entropy",
    "dropout",
    "reshape",
    "transpose",
    "take_rows",
    "scatter_rows",
    "concat",
    "column",
    "split_heads",
    "merge_heads",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


_local = threading.local()
_seq = itertools.count()


def _get(name, default):
    return getattr(_local, name, default)


def default_dtype():
    return _get("dtype", np.float32)


def is_grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording backward rules (inference)."""
    prev = is_grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` (np.float32 or np.float64)."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


@dataclass
class MultAddCounter:
    total: int = 0
    by_tag: dict = field(default_factory=dict)

    def add(self, n: int, tag: str | None) -> None:
        self.total += n
        if tag is not None:
            self.by_tag[tag] = self.by_tag.get(tag, 0) + n


@contextlib.contextmanager
def count_mult_adds():
    """Count scalar multiply-accumulates performed by forward matmuls.

    Yields a :class:`MultAddCounter`.  Counters nest; an inner counter's
    operations are also added to every enclosing counter.
    """
    counter = MultAddCounter()
    stack = _get("counters", ())
    _local.counters = stack + (counter,)
    try:
        yield counter
    finally:
        _local.counters = stack


def _record_mult_adds(n: int, tag: str | None) -> None:
    for c in _get("counters", ()):
        c.add(n, tag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of 3")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad, name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad, name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), True, name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor, tag: str | None = None) -> Tensor:
    """``[m,k] x [k,n] -> [m,n]``; one mult-add per scalar product term."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    m, k = a.shape
    n = b.shape[1]
    _record_mult_adds(m * k * n, tag)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def bmm(a: Tensor, b: Tensor, transpose_b: bool = False, tag: str | None = None) -> Tensor:
    """Batched matmul over the leading axis, optionally against ``b`` transposed."""
    a, b = _as_tensor(a), _as_tensor(b)
    bt = b.data.transpose(0, 2, 1) if transpose_b else b.data
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != bt.shape[1]:
        raise DimensionError(
            f"bmm shapes {a.shape} and {b.shape} (transpose_b={transpose_b}) do not align"
        )
    nb, m, k = a.shape
    _record_mult_adds(nb * m * k * bt.shape[2], tag)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ bt.transpose(0, 2, 1))
        if b.requires_grad:
            gb = a.data.transpose(0, 2, 1) @ g
            b._accumulate(gb.transpose(0, 2, 1) if transpose_b else gb)

    return _make(a.data @ bt, (a, b), bw)


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def bw(g):
        x._accumulate(g * c)

    return _make(x.data * c, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), bw)


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated as ``max(x, 0) + log1p(exp(-|x|))``."""
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def bw(g):
        x._accumulate(g / (1 + np.exp(-d)))

    return _make(out.astype(d.dtype), (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return _make(out, (x,), bw)


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    d = x.data if floor is None else np.maximum(x.data, x.data.dtype.type(floor))

    def bw(g):
        gx = g / d
        if floor is not None:
            gx = np.where(x.data >= floor, gx, 0)
        x._accumulate(gx)

    return _make(np.log(d), (x,), bw)


# --------------------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis, keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then ``gain*x + bias``."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = d.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
            x._accumulate(gx)

    return _make(out.astype(d.dtype), (x, gain, bias), bw)


def cross_entropy(
    logits: Tensor,
    targets: Sequence[int] | np.ndarray,
    label_smoothing: float = 0.0,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Mean (label-smoothed) negative log-likelihood over rows of ``logits``.

    Rows where ``mask`` is false are left out of both the sum and the count.
    Smoothing spreads ``label_smoothing`` uniformly over the whole vocabulary.
    """
    t = np.asarray(targets, dtype=np.int64)
    rows, vocab = logits.shape
    if t.shape != (rows,):
        raise DimensionError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target index out of range [0, {vocab})")
    keep = np.ones(rows, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = max(int(keep.sum()), 1)
    lp = log_softmax(logits, axis=-1)
    dist = np.zeros(logits.shape, dtype=logits.data.dtype)
    if label_smoothing:
        dist += label_smoothing / vocab
    dist[np.arange(rows), t] += 1.0 - label_smoothing
    dist *= keep[:, None] / count
    return scale(sum(mul(lp, Tensor(dist))), -1.0)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; the identity when ``p == 0`` or not training."""
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# --------------------------------------------------------------------------- shape and routing


def transpose(x: Tensor) -> Tensor:
    """Matrix transpose."""

    def bw(g):
        x._accumulate(g.T)

    return _make(x.data.T, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def _index_add(out: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """``out[idx] += vals`` with repeated indices summed (a faster ``np.add.at``)."""
    if idx.size == 0:
        return
    order = np.argsort(idx, kind="stable")
    uniq, starts = np.unique(idx[order], return_index=True)
    if uniq.size == idx.size:
        out[idx] += vals
    else:
        out[uniq] += np.add.reduceat(vals[order], starts, axis=0)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``x[idx]`` along the leading axis."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        _index_add(gx, idx, g)
        x._accumulate(gx)

    return _make(x.data[idx], (x,), bw)


def scatter_rows(parts: Sequence[Tensor], indices: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Sum ``parts[i]`` into rows ``indices[i]`` of an ``n_rows``-row zero tensor."""
    if not parts:
        raise ContractError("scatter_rows needs at least one part")
    tail = parts[0].shape[1:]
    out = np.zeros((n_rows,) + tail, dtype=parts[0].data.dtype)
    idxs = [np.asarray(i, dtype=np.int64) for i in indices]
    for p, i in zip(parts, idxs):
        if p.shape[0] != i.shape[0] or p.shape[1:] != tail:
            raise DimensionError(f"part {p.shape} does not fit {i.shape[0]} rows of {tail}")
        _index_add(out, i, p.data)

    def bw(g):
        for p, i in zip(parts, idxs):
            if p.requires_grad:
                p._accumulate(g[i])

    return _make(out, tuple(parts), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            if p.requires_grad:
                p._accumulate(piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of a matrix, kept as an ``[m, 1]`` tensor."""

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, j : j + 1] = g
        x._accumulate(gx)

    return _make(x.data[:, j : j + 1], (x,), bw)


def split_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    """``[batch*len, d] -> [batch*heads, len, d/heads]``."""
    rows, d = x.shape
    length = rows // batch
    dh = d // heads

    def fwd(a):
        return a.reshape(batch, length, heads, dh).transpose(0, 2, 1, 3).reshape(batch * heads, length, dh)

    def bw(g):
        x._accumulate(g.reshape(batch, heads, length, dh).transpose(0, 2, 1, 3).reshape(rows, d))

    return _make(fwd(x.data), (x,), bw)


def merge_heads(x: Tensor, batch: int) -> Tensor:
    """``[batch*heads, len, dh] -> [batch*len, heads*dh]``; inverse of :func:`split_heads`."""
    bh, length, dh = x.shape
    heads = bh // batch

    def bw(g):
        x._accumulate(g.reshape(batch, length, heads, dh).transpose(0, 2, 1, 3).reshape(bh, length, dh))

    out = x.data.reshape(batch, heads, length, dh).transpose(0, 2, 1, 3).reshape(batch * length, heads * dh)
    return _make(out, (x,), bw)


# --------------------------------------------------------------------------- gradients


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every reachable ``t``.

    Nodes are visited in exact reverse order of creation, so a node's
    gradient is complete before its backward rule runs.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._seq in nodes:
            continue
        nodes[t._seq] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    loss._accumulate(np.ones_like(loss.data))
    for seq in sorted(nodes, reverse=True):
        t = nodes[seq]
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-3,
    tol: float = 1e-3,
    indices: Sequence[tuple] | None = None,
    floor: float = 1e-6,
    order: int = 2,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` w.r.t. ``x`` with central differences.

    ``f`` is re-evaluated with ``x.data`` perturbed in place; ``order`` 2 or 4
    selects the three- or five-point stencil.  The relative error of an
    element is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps elements
    whose true gradient is ~0 from dominating the report.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    stencil = {2: ((1, 1.0), (-1, -1.0)), 4: ((2, -1.0), (1, 8.0), (-1, -8.0), (-2, 1.0))}[order]
    divisor = 2 * h if order == 2 else 12 * h
    x.grad = None
    loss = f()
    backward(loss)
    analytic_full = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    analytic = np.empty(len(indices))
    numeric = np.empty(len(indices))
    with no_grad():
        for n, ix in enumerate(indices):
            orig = x.data[ix].copy()
            acc = 0.0
            for step, weight in stencil:
                x.data[ix] = orig + step * h
                acc += weight * float(f().data)
            x.data[ix] = orig
            numeric[n] = acc / divisor
            analytic[n] = analytic_full[ix]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if len(indices) else 0.0
    return GradCheckReport(err, len(indices), analytic, numeric, tol)
