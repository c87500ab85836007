"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor` objects.  While a :class:`Tape`
is active (``with Tape() as tape:``) any op touching a grad-tracked input is
recorded together with a closure that maps the output cotangent to input
cotangents.  ``tape.backward(loss)`` then replays the record in reverse.

Leading batch dimensions are allowed everywhere; ``add``/``sub``/``mul``
follow numpy broadcasting and reduce gradients back onto the input shapes.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "JacobiConvergenceError",
    "tensor",
    "apply",
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "concat",
    "slice_",
    "gather_rows",
    "relu",
    "tanh",
    "exp",
    "log",
    "sum_",
    "mean",
    "masked_softmax",
    "transpose",
    "reshape",
    "singular_values",
]


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


class JacobiConvergenceError(TensorError, ArithmeticError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "heteromorpheus_active_tape", default=None
)


class Tensor:
    """Immutable n-d array of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal fast path: arr is already a fresh float64 array
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar, all routed through the recorded ops
    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@dataclass
class _Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the block are recorded.
    A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed; record a new forward pass")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def _record(self, kind, inputs, output, vjp) -> None:
        if self._consumed:
            raise TapeError("cannot record on a consumed tape")
        for t in inputs:
            if t.requires_grad and id(t) not in self._outputs:
                self._leaves.setdefault(id(t), t)
        self.records.append(_Record(kind, inputs, output, vjp))
        self._outputs.add(id(output))

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def backward(self, loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor] | None = None):
        """Gradient of scalar ``loss`` with respect to grad-tracked leaves.

        ``wrt`` may be a mapping (returns a dict with the same keys), a
        sequence (returns a list) or None (returns ``{id(leaf): grad}`` for
        every leaf seen on the tape).  Leaves the loss does not depend on get
        zero gradients.
        """
        if self._consumed:
            raise TapeError("backward already ran on this tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss was not produced under this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        self.records = []

        def grad_of(t: Tensor) -> Tensor:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            return Tensor._wrap(np.array(g, dtype=np.float64), False)

        if wrt is None:
            return {key: grad_of(t) for key, t in self._leaves.items()}
        if isinstance(wrt, Mapping):
            return {k: grad_of(t) for k, t in wrt.items()}
        return [grad_of(t) for t in wrt]


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _finish(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        tape._record(kind, inputs, result, vjp)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _finish("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (numpy broadcasting)."""
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _finish("concat", tensors, out, vjp)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not (isinstance(part, (int, slice, np.integer)) or part is Ellipsis or part is None):
            raise ShapeError("slice_ supports basic indexing only; use gather_rows for index arrays")
    out = np.array(a.data[index], dtype=np.float64)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _finish("slice", (a,), out, vjp)


def gather_rows(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries ``indices`` along ``axis`` (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows indices must be one-dimensional")
    ax = axis % a.ndim
    n = a.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather_rows index out of range for axis of length {n}")
    out = np.take(a.data, idx, axis=ax)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _finish("gather_rows", (a,), out, vjp)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _finish("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _finish("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _finish("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _finish("log", (a,), y, lambda g: (g / x,))


def sum_(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", (a,), out, vjp)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[ax] for ax in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _finish("mean", (a,), out, vjp)


def masked_softmax(a: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``mask`` is true.

    Masked positions come out as exactly 0.  The max over unmasked entries is
    subtracted before exponentiating.  A slice with no unmasked entry yields
    all zeros.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    x = a.data
    shifted = np.where(m, x, -np.inf)
    peak = shifted.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(m, np.exp(np.where(m, x - peak, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / np.where(denom > 0, denom, 1.0)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish("masked_softmax", (a,), y, vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _finish("transpose", (a,), out, lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape_in = a.shape
    try:
        out = a.data.reshape(tuple(shape)).copy()
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _finish("reshape", (a,), out, lambda g: (g.reshape(shape_in),))


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "concat": concat,
    "slice": slice_,
    "gather_rows": gather_rows,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "masked_softmax": masked_softmax,
    "transpose": transpose,
    "reshape": reshape,
}


def apply(kind: str, inputs: Iterable[Tensor], **attrs) -> Tensor:
    """Dispatch an op by name.  ``concat`` takes its inputs as one sequence."""
    fn = _OPS.get(kind.replace("-", "_"))
    if fn is None:
        raise TensorError(f"unknown op kind {kind!r}")
    inputs = [_as_tensor(t) for t in inputs]
    if fn is concat:
        return concat(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# singular values


def _jacobi_eigvalsh(a: np.ndarray, max_sweeps: int = 50) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    scale = np.sqrt((a * a).sum())
    if n == 1 or scale == 0.0:
        return a.diagonal().copy()
    # rounding floor of the rotations grows with n
    tol = 4.0 * n * np.finfo(np.float64).eps * scale
    eye = np.eye(n, dtype=bool)
    for sweep in range(max_sweeps + 1):
        off = np.sqrt(np.square(a[~eye]).sum())
        if off <= tol:
            return a.diagonal().copy()
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
    raise JacobiConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off-norm {off:.3e})")


def singular_values(m: Tensor | np.ndarray, max_sweeps: int = 50) -> np.ndarray:
    """All min(rows, cols) singular values, descending.

    Eigenvalues of the smaller Gram matrix via cyclic Jacobi rotations;
    square roots are clamped at zero.
    """
    arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"singular_values needs a matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("singular_values of a non-finite matrix")
    gram = arr.T @ arr if arr.shape[1] <= arr.shape[0] else arr @ arr.T
    eig = _jacobi_eigvalsh(gram, max_sweeps=max_sweeps)
    return np.sort(np.sqrt(np.clip(eig, 0.0, None)))[::-1]
