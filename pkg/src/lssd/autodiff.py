"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays (float32 by default). Reductions accumulate in
float64 and cast back. Operations are recorded on the innermost active
:class:`Tape` whenever at least one input requires a gradient; outside a
tape nothing is recorded, which is how teacher and evaluation passes run.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(tape, y)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "backward",
    "gradient_check",
    "precision",
    "get_dtype",
    "concat",
    "take",
    "gather",
    "softmax",
    "PRIMITIVES",
]

PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "matmul",
    "exp", "log", "tanh", "relu", "sqrt", "softmax",
    "take", "gather", "sum", "mean", "concat", "slice",
    "reshape", "transpose",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.dtype(np.float32)
        self.tapes: list[Tape] = []


_state = _State()


def get_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    old = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


class _Op:
    __slots__ = ("kind", "inputs", "out", "grad_fn", "tape")

    def __init__(self, kind, inputs, out, grad_fn, tape):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.grad_fn = grad_fn
        self.tape = tape


class Tape:
    """Ordered record of primitive operations.

    Entering the tape makes it the recording target for this thread.
    """

    def __init__(self) -> None:
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.tapes.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, root: "Tensor") -> None:
        backward(self, root)


def _active_tape() -> Tape | None:
    return _state.tapes[-1] if _state.tapes else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: _Op | None = None

    # ---- introspection -------------------------------------------------
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
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ---- operators -----------------------------------------------------
    def __add__(self, other):
        return _add(self, _wrap(other))

    def __radd__(self, other):
        return _add(_wrap(other), self)

    def __sub__(self, other):
        return _sub(self, _wrap(other))

    def __rsub__(self, other):
        return _sub(_wrap(other), self)

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    def __rmul__(self, other):
        return _mul(_wrap(other), self)

    def __truediv__(self, other):
        return _div(self, _wrap(other))

    def __rtruediv__(self, other):
        return _div(_wrap(other), self)

    def __neg__(self):
        return _neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return _slice(self, index)

    # ---- methods -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return _exp(self)

    def log(self, floor: float | None = None) -> "Tensor":
        return _log(self, floor)

    def tanh(self) -> "Tensor":
        return _tanh(self)

    def relu(self) -> "Tensor":
        return _relu(self)

    def sqrt(self) -> "Tensor":
        return _sqrt(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind: str, arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind}: non-finite values in {what}")


def _make(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if not np.isfinite(data).all():
        for t in inputs:
            _check_finite(kind, t.data, "input")
        _check_finite(kind, data, "output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        op = _Op(kind, inputs, out, grad_fn, tape)
        out._op = op
        tape.ops.append(op)
    else:
        out.requires_grad = False
    return out


def _sum64(arr: np.ndarray, axes: tuple[int, ...], keepdims: bool = False) -> np.ndarray:
    """Sum over ``axes`` with a float64 accumulator.

    Leading or trailing axis blocks go through a matrix-vector product, which
    is much faster than ufunc reduction over short inner axes.
    """
    nd = arr.ndim
    if not axes:
        return arr.astype(np.float64)
    kept = tuple(n for i, n in enumerate(arr.shape) if i not in axes)
    if axes == tuple(range(nd - len(axes), nd)):
        n = int(np.prod(arr.shape[nd - len(axes):]))
        out = arr.reshape(-1, n) @ np.ones(n)
    elif axes == tuple(range(len(axes))):
        n = int(np.prod(arr.shape[: len(axes)]))
        out = np.ones(n) @ arr.reshape(n, -1)
    else:
        out = arr.sum(axis=axes, dtype=np.float64)
    out = out.reshape(kept)
    if keepdims:
        out = out.reshape(tuple(1 if i in axes else n for i, n in enumerate(arr.shape)))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    dtype = grad.dtype
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = _sum64(grad, tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = _sum64(grad, axes, keepdims=True)
    return grad.astype(dtype, copy=False).reshape(shape)


def _shape_error(kind: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}")


# ---- elementwise ---------------------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a, b) from None
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(g, b.shape) if b.requires_grad else None))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a, b) from None
    return _make("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g, b.shape) if b.requires_grad else None))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a, b) from None
    return _make("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def _div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise _shape_error("div", a, b) from None

    def grad_fn(g):
        ga = g / b.data
        return (_unbroadcast(ga, a.shape) if a.requires_grad else None,
                _unbroadcast(-ga * out, b.shape) if b.requires_grad else None)

    return _make("div", out, (a, b), grad_fn)


def _neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def _exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def _log(a: Tensor, floor: float | None) -> Tensor:
    x = a.data
    if floor is not None:
        live = x >= floor
        out = np.log(np.maximum(x, floor))
        return _make("log", out, (a,), lambda g: (np.where(live, g / np.maximum(x, floor), 0).astype(x.dtype),))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make("log", out, (a,), lambda g: (g / x,))


def _tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def _relu(a: Tensor) -> Tensor:
    live = a.data > 0
    return _make("relu", a.data * live, (a,), lambda g: (g * live,))


def _sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g / (2 * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    axes = (axis % x.ndim,)
    if axes[0] == x.ndim - 1:
        # reduce a contiguous transposed copy; ufunc max over short inner axes is slow
        peak = np.ascontiguousarray(np.moveaxis(x, -1, 0)).max(axis=0)[..., None]
    else:
        peak = x.max(axis=axis, keepdims=True)
    e = np.exp(x - peak)
    out = (e / _sum64(e, axes, keepdims=True)).astype(x.dtype)

    def grad_fn(g):
        dot = _sum64(g * out, axes, keepdims=True).astype(x.dtype)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), grad_fn)


# ---- contraction ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} and {b.shape}") from None
    out = a.data @ b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), grad_fn)


# ---- reductions ----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = _sum64(a.data, axes, keepdims).astype(a.data.dtype)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), grad_fn)


def _mean(a: Tensor, axis, keepdims: bool) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = (_sum64(a.data, axes, keepdims) / count).astype(a.data.dtype)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype),)

    return _make("mean", out, (a,), grad_fn)


# ---- indexing and layout -------------------------------------------------

def take(weight: Tensor, ids) -> Tensor:
    """Row lookup: ``weight[ids]`` for an integer array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"take: index out of range for shape {weight.shape}")
    out = weight.data[ids]

    def grad_fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape((-1,) + weight.shape[1:]))
        return (full,)

    return _make("take", out, (weight,), grad_fn)


def gather(a: Tensor, index) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"gather: index shape {index.shape} does not match {a.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise ShapeError(f"gather: index out of range for last axis of {a.shape}")
    idx = index[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make("gather", out, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def _slice(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("slice", np.array(out, copy=True), (a,), grad_fn)


def _reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _transpose(a: Tensor, axes) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes) if axes is not None else None
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


# ---- backward ------------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tensor on the tape
    path from ``root`` that requires a gradient."""
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._op is None or root._op.tape is not tape:
        raise TapeError("root was not produced on this tape")

    pending: dict[int, list] = {id(root): [root, np.ones_like(root.data)]}
    for op in reversed(tape.ops):
        entry = pending.pop(id(op.out), None)
        if entry is None:
            continue
        out, g = entry
        out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(op.inputs, op.grad_fn(g)):
            if not inp.requires_grad:
                continue
            slot = pending.get(id(inp))
            if slot is None:
                pending[id(inp)] = [inp, gi]
            else:
                slot[1] = slot[1] + gi
    # whatever remains are leaves (or outputs of other tapes)
    for t, g in pending.values():
        if not np.isfinite(g).all():
            raise NonFiniteError("backward: non-finite gradient")
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g


# ---- finite-difference check --------------------------------------------

def gradient_check(
    f: Callable,
    point: Tensor | Sequence[Tensor],
    step: float = 1e-4,
    coords: Sequence[tuple[int, int]] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` is a tensor or a sequence of tensors; ``f`` is called with the
    same structure and must return a scalar tensor. Evaluation happens in
    float64 with the point tensors cast in place and restored afterwards.
    ``coords`` restricts the comparison to ``(tensor_index, flat_index)``
    pairs; by default every coordinate is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(point, Tensor)
    tensors = [point] if single else list(point)
    saved = [(t.data, t.grad, t.requires_grad) for t in tensors]

    def call():
        out = f(tensors[0]) if single else f(tensors)
        val = out.item()
        if not np.isfinite(val):
            raise NonFiniteError("gradient_check: f returned a non-finite value")
        return out, val

    try:
        with precision(np.float64):
            for t in tensors:
                t.data = t.data.astype(np.float64)
                t.grad = None
                t.requires_grad = True
            with Tape() as tape:
                out, _ = call()
            backward(tape, out)
            analytic = [np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy() for t in tensors]
            if coords is None:
                coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.size)]
            worst = 0.0
            for i, j in coords:
                flat = tensors[i].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + step
                _, up = call()
                flat[j] = orig - step
                _, down = call()
                flat[j] = orig
                numeric = (up - down) / (2 * step)
                a = analytic[i][j]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    finally:
        for t, (data, grad, req) in zip(tensors, saved):
            t.data = data
            t.grad = grad
            t.requires_grad = req
    return worst
