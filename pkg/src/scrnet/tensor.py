"""Dense float64 tensors with eagerly recorded reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` carrying a
graph record (parents, vector-Jacobian product, sequence number).  Calling
:func:`backward` on a scalar replays the records reachable from it in reverse
recording order and accumulates gradients into leaf tensors that have
``requires_grad`` set.

Broadcasting is deliberately narrow: a size-1 operand broadcasts against
anything, and an operand whose shape is a prefix of the other's followed by
unit extents (e.g. ``(N, C, 1, 1)`` against ``(N, C, H, W)``) broadcasts over
the trailing axes.  Everything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True
_branch_log: list[bytes] | None = None


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NonDeterministicError(RuntimeError):
    """A function under gradient check gave two different baseline values."""


class _Node:
    __slots__ = ("parents", "vjp", "seq", "op")

    def __init__(self, parents, vjp, op):
        self.parents = parents
        self.vjp = vjp
        self.seq = next(_seq)
        self.op = op


# stands in for a node whose graph was released by backward()
_RELEASED = _Node((), None, "released")


class Tensor:
    """N-dimensional float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method shorthands ---------------------------------------------
    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "sum", axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "mean", axes, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def softmax(self, axis: int) -> "Tensor":
        return softmax(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


class Parameter(Tensor):
    """A named trainable tensor with Adam moment buffers."""

    __slots__ = ("m", "v")

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


# ---------------------------------------------------------------------------
# graph recording
# ---------------------------------------------------------------------------


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def branch_trace() -> Iterator[list[bytes]]:
    """Collect digests of every discrete branch decision taken in the block.

    Non-smooth operations (ReLU, max pooling, hard thresholds) report their
    decisions through :func:`note_branch`.  Two evaluations with equal traces
    went through the same smooth piece of the function.
    """
    global _branch_log
    prev = _branch_log
    log_: list[bytes] = []
    _branch_log = log_
    try:
        yield log_
    finally:
        _branch_log = prev


def note_branch(decision: np.ndarray) -> None:
    if _branch_log is not None:
        arr = np.ascontiguousarray(decision)
        _branch_log.append(hashlib.blake2b(arr.tobytes(), digest_size=16).digest())


def record(
    data: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str = "",
) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``vjp`` maps the output gradient to one gradient per parent (``None``
    for parents that need none).  No record is kept when grad mode is off or
    no parent requires a gradient.
    """
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), vjp, op)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a single-element loss, got shape {loss.shape}")
    if loss._node is _RELEASED:
        raise RuntimeError("graph already released by an earlier backward(); pass retain_graph=True to reuse it")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, seed)
        return

    reach: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or t._node is _RELEASED or id(t) in reach:
            continue
        reach[id(t)] = t
        stack.extend(t._node.parents)
    order = sorted(reach.values(), key=lambda t: t._node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for t in order:
        node = t._node
        g = grads.pop(id(t), None)
        if not retain_graph:
            t._node = _RELEASED
        if g is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.shape:
                raise ShapeError(f"{node.op}: gradient shape {gp.shape} != operand {p.shape}")
            if p._node is None:
                _accumulate(p, gp)
            elif p._node is not _RELEASED:
                k = id(p)
                grads[k] = grads[k] + gp if k in grads else gp


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        leaf.grad += g


# ---------------------------------------------------------------------------
# broadcasting (scalar and trailing-unit-axes only)
# ---------------------------------------------------------------------------


def _fits(small: tuple[int, ...], big: tuple[int, ...]) -> bool:
    if int(np.prod(small)) == 1:
        return True
    if len(small) != len(big):
        return False
    k = len(small)
    while k > 0 and small[k - 1] == 1:
        k -= 1
    return small[:k] == big[:k]


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if _fits(b, a):
        return a
    if _fits(a, b):
        return b
    raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) != g.ndim:
        return np.full(shape, g.sum())
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
    return g.sum(axis=axes, keepdims=True)


def _bview(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if arr.shape == shape or arr.ndim == len(shape):
        return arr
    return arr.reshape(())


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    out = _bview(a.data, shape) + _bview(b.data, shape)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    out = _bview(a.data, shape) - _bview(b.data, shape)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    ad, bd = _bview(a.data, shape), _bview(b.data, shape)

    def vjp(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return record(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    ad, bd = _bview(a.data, shape), _bview(b.data, shape)
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), vjp, "div")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,), "scalar_mul")


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``div``, ``scalar_mul``, ``exp``, ``neg``."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "sub":
        return sub(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "div":
        return div(a, b)
    if op_kind == "scalar_mul":
        return scalar_mul(as_tensor(a), b)
    if op_kind == "exp":
        return exp(as_tensor(a))
    if op_kind == "neg":
        return neg(as_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# ---------------------------------------------------------------------------
# linear algebra, softmax, reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return record(ad @ bd, (a, b), vjp, "matmul")


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x: Tensor, axis: int) -> Tensor:
    ax = _axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return record(y, (x,), vjp, "softmax")


def reduce(x: Tensor, kind: str = "sum", axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(_axis(a, x.ndim) for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"repeated reduction axes {axes}")
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / int(np.prod([x.shape[a] for a in axes]))
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def vjp(g):
        return (np.broadcast_to(g.reshape(kept) * scale, x.shape).copy(),)

    return record(np.asarray(out, dtype=np.float64), (x,), vjp, kind)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ax = _axis(axis, parts[0].ndim)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {ax}: ragged shapes {ref} and {p.shape}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        idx = [slice(None)] * g.ndim
        out = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)] if p.requires_grad else None)
        return out

    return record(np.concatenate([p.data for p in parts], axis=ax), parts, vjp, "concat")


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    ax = _axis(axis, x.ndim)
    if sum(sizes) != x.shape[ax] or any(s <= 0 for s in sizes):
        raise ShapeError(f"split sizes {list(sizes)} do not partition extent {x.shape[ax]}")
    out = []
    lo = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(lo, lo + s)
        key = tuple(idx)

        def vjp(g, key=key):
            full = np.zeros(x.shape)
            full[key] = g
            return (full,)

        out.append(record(x.data[key].copy(), (x,), vjp, "split"))
        lo += s
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    checked: int
    skipped: int = 0
    worst_index: tuple[int, ...] | None = None
    analytic: np.ndarray | None = field(default=None, repr=False)
    numeric: np.ndarray | None = field(default=None, repr=False)


def rel_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def _scalar(y) -> float:
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    if arr.size != 1:
        raise ShapeError(f"function under check must be scalar-valued, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def _evaluate(f, x, skip_kinks):
    with no_grad():
        if skip_kinks:
            with branch_trace() as trace:
                val = _scalar(f(x))
            return val, tuple(trace)
        return _scalar(f(x)), None


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-6,
    coords: int | Sequence[tuple[int, ...]] | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
    analytic: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare the recorded gradient of scalar ``f`` at ``x`` with central differences.

    ``coords`` restricts the check to a random sample of that many coordinates
    (or to an explicit index list).  With ``skip_kinks`` a coordinate whose
    perturbation flips any discrete branch (ReLU sign, pooling argmax, hard
    mask) is skipped and, when sampling, replaced by another coordinate.
    ``analytic`` lets a caller reuse one backward pass for many tensors.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if analytic is None:
        x.grad = None
        was = x.requires_grad
        x.requires_grad = True
        y = f(x)
        _scalar(y)
        backward(y)
        x.requires_grad = was
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()

    base, base_trace = _evaluate(f, x, skip_kinks)
    again, _ = _evaluate(f, x, skip_kinks)
    if base != again:
        raise NonDeterministicError(f"f(x) changed between evaluations: {base!r} vs {again!r}")

    all_idx = list(np.ndindex(x.shape))
    if coords is None:
        pool, want = all_idx, len(all_idx)
    elif isinstance(coords, int):
        rng = rng or np.random.default_rng(0)
        pool = [all_idx[i] for i in rng.permutation(len(all_idx))]
        want = min(coords, len(all_idx))
    else:
        pool = [tuple(c) for c in coords]
        want = len(pool)

    numeric = np.full(x.shape, np.nan)
    worst, worst_idx, checked, skipped = 0.0, None, 0, 0
    for idx in pool:
        if checked >= want:
            break
        orig = x.data[idx]
        x.data[idx] = orig + h
        fp, tp = _evaluate(f, x, skip_kinks)
        x.data[idx] = orig - h
        fm, tm = _evaluate(f, x, skip_kinks)
        x.data[idx] = orig
        if skip_kinks and (tp != base_trace or tm != base_trace):
            skipped += 1
            continue
        n = (fp - fm) / (2.0 * h)
        numeric[idx] = n
        err = float(rel_error(analytic[idx], n))
        if worst_idx is None or err > worst:
            worst, worst_idx = err, idx
        checked += 1

    passed = worst <= tol and checked > 0 and skipped <= max(checked, 1)
    return GradCheckReport(worst, passed, tol, checked, skipped, worst_idx, analytic, numeric)
