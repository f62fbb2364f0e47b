"""Dense float tensors with reverse-mode differentiation on an explicit tape.

Every primitive op computes its forward result eagerly with numpy and,
when a tape is active and some input requires a gradient, appends one
record holding a vector-Jacobian closure.  The tape's record order is
the execution order, so the backward pass is a single reversed sweep
that touches each record exactly once.  There is no graph pruning or
retained-graph mode: ``backward`` consumes the tape.

Float32 is the working precision; gradient checks build float64 tensors
and every op preserves the dtype of its inputs.  Any primitive whose
forward output contains NaN or Inf raises ``NumericError`` immediately,
so overflow is an error rather than a silent value.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class Tensor:
    """A numpy array plus gradient bookkeeping.

    The ``data`` buffer is treated as immutable by every op in this
    module; optimizers rebind ``data`` to freshly allocated arrays
    instead of writing in place, so snapshots that copied an array
    never observe later updates.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar -------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of executed primitives; single use, single thread."""

    __slots__ = ("records", "consumed")

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)


_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Run ops with gradient recording onto ``tape`` (a fresh one by default)."""
    t = Tape() if tape is None else tape
    _STACK.append(t)
    try:
        yield t
    finally:
        _STACK.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; forwards run but produce constant tensors."""
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar ``loss`` recorded on a live tape.

    Gradients accumulate additively into ``.grad`` of every tensor with
    ``requires_grad`` reachable from the loss.  The tape is consumed:
    records are dropped and a second call raises ``ContractError``.
    """
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active tape")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward()")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = flowing.pop(id(rec.output), None)
        holders.pop(id(rec.output), None)
        if g is None:
            continue
        input_grads = rec.vjp(g)
        for tensor, ig in zip(rec.inputs, input_grads):
            if ig is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in flowing:
                flowing[key] = flowing[key] + ig
            else:
                flowing[key] = ig
                holders[key] = tensor
    # whatever is left never appeared as an output: these are the leaves
    for key, g in flowing.items():
        leaf = holders[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.consumed = True
    tape.records.clear()


# ---------------------------------------------------------------------------
# op plumbing


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"op '{op}' produced non-finite values")


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    _check_finite(op, out_data)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(TapeRecord(op, inputs, out, vjp))
        out._tape = tape
    return out


def _as_tensor(x, ref: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = ref.data.dtype if ref is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return _as_tensor(a), _as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` by collapsing broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _record("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), out, vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record("div", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _record("neg", (a,), -a.data, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast, grads sum back."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# shape primitives


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _record("transpose", (a,), a.data.transpose(axes), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    original = a.data.shape

    def vjp(g):
        return (g.reshape(original),)

    return _record("reshape", (a,), a.data.reshape(shape), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", parts, out, vjp)


_BASIC_INDEX_TYPES = (int, slice, type(Ellipsis), type(None))


def slice_(a: Tensor, key) -> Tensor:
    """Basic indexing only (ints/slices); fancy gathers go through gather_rows."""
    probe = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, _BASIC_INDEX_TYPES) for k in probe):
        raise ContractError("slice_ supports basic indexing only")
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _record("slice", (a,), out, vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Index axis 0 with an integer array; backward scatter-adds."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ContractError("gather_rows needs integer indices")
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.reshape(-1), g.reshape(-1, *a.data.shape[1:]))
        return (ga,)

    return _record("gather_rows", (a,), out, vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record("sum", (a,), out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out.size

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _record("mean", (a,), out, vjp)


# ---------------------------------------------------------------------------
# nonlinear primitives


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _record("log", (a,), out, vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        # guard the pole at zero so a zero residual yields a zero update
        return (g * 0.5 / np.maximum(out, 1e-12),)

    return _record("sqrt", (a,), out, vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _record("gelu", (a,), out, vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record("softmax", (a,), s, vjp)


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    se = e.sum(axis=axis, keepdims=True)
    out = np.log(se) + m
    soft = e / se
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return _record("logsumexp", (a,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift."""
    if gain.data.shape != x.data.shape[-1:] or bias.data.shape != x.data.shape[-1:]:
        raise DimensionError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = ggain = gbias = None
        dxhat = g * gain.data
        if x.requires_grad:
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.data.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.data.shape)
        return gx, ggain, gbias

    return _record("layer_norm", (x, gain, bias), out, vjp)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm (nonzero input)."""
    sq = (a.data * a.data).sum(axis=axis, keepdims=True) + eps
    n = np.sqrt(sq)
    out = a.data / n

    def vjp(g):
        dot = (g * a.data).sum(axis=axis, keepdims=True)
        return (g / n - a.data * dot / (n * sq),)

    return _record("l2_normalize", (a,), out, vjp)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity (not even recorded) at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    out = a.data * keep

    def vjp(g):
        return (g * keep,)

    return _record("dropout", (a,), out, vjp)
