"""Dense float64 tensors with taped reverse-mode differentiation and FLOP metering.

Every model in this package is written against this substrate.  Values are
row-major numpy float64 arrays and are treated as immutable once created
(optimizers swap a leaf's buffer between steps via ``Tensor.assign``).  While
a :class:`Tape` is active on the current thread, each operation appends a
record (operation kind, input/output node ids, saved forward values) so that
:func:`backward` can push cotangents back to the leaves.  While a
:class:`FlopMeter` is active, each operation adds the scalar work implied by
its shapes.

Counting convention, applied consistently everywhere:

* one scalar multiply-add counts as 1 madd = 2 FLOPs; bare adds, subtracts
  and multiplies are tallied as madds too,
* one scalar exp/log/division/square-root counts as 1 transcendental = 1 FLOP,
* comparisons, copies, negation and data movement are free.

Counts are derived from shapes only (masked entries are not discounted), so
two runs of the same graph always produce identical totals.

Tapes and meters are thread-local: independent training runs may proceed in
parallel threads, but a single tape must never be shared across threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

MADD_FLOPS = 2
TRANSCENDENTAL_FLOPS = 1

_state = threading.local()


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class Tensor:
    """A dense float64 value, optionally participating in the active tape.

    ``grad`` is populated by :func:`backward` for leaves created with
    ``requires_grad=True`` and accumulates across repeated backward calls;
    use :meth:`zero_grad` to reset it.
    """

    __slots__ = ("data", "grad", "node_id", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.requires_grad = requires_grad
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, data: np.ndarray) -> None:
        """Replace the value buffer (parameter update between steps).

        Only valid on leaves and only between tapes; shapes must match.
        """
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise ShapeMismatchError(
                f"assign shape {data.shape} != tensor shape {self.data.shape}")
        self.data = data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # operator sugar; scalars fold into dedicated constant-operand ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """A leaf tensor that should receive gradients."""
    return Tensor(data, requires_grad=True)


class FlopMeter:
    """Running tally of scalar multiply-adds and transcendental evaluations.

    ``total_flops`` applies the documented convention (madd = 2 FLOPs,
    transcendental = 1 FLOP).  Counts only grow while the meter is installed
    on the current thread (use the meter as a context manager).
    """

    def __init__(self):
        self.madds = 0
        self.transcendentals = 0

    def add(self, madds: int = 0, transcendentals: int = 0) -> None:
        self.madds += int(madds)
        self.transcendentals += int(transcendentals)

    @property
    def total_flops(self) -> int:
        return MADD_FLOPS * self.madds + TRANSCENDENTAL_FLOPS * self.transcendentals

    def totals(self) -> tuple:
        """(madds, transcendentals, total_flops)."""
        return (self.madds, self.transcendentals, self.total_flops)

    def reset(self) -> None:
        self.madds = 0
        self.transcendentals = 0

    def __enter__(self) -> "FlopMeter":
        if getattr(_state, "meter", None) is not None:
            raise RuntimeError("a FlopMeter is already active on this thread")
        _state.meter = self
        return self

    def __exit__(self, *exc):
        _state.meter = None
        return False


class TapeRecord:
    """One recorded operation: kind, wiring, saved values, and cost metadata.

    ``meta`` holds the shape-derived sizes an independent cost walker needs
    to re-derive this record's FLOP charge.
    """

    __slots__ = ("kind", "input_ids", "output_id", "saved", "meta")

    def __init__(self, kind, input_ids, output_id, saved, meta):
        self.kind = kind
        self.input_ids = input_ids
        self.output_id = output_id
        self.saved = saved
        self.meta = meta


class Tape:
    """Ordered record of operations for one forward pass on one thread.

    Records are appended in execution order, so every record's inputs are
    produced by earlier records or are leaves; one reverse sweep therefore
    visits each node after all of its consumers.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.leaves: dict[int, Tensor] = {}
        self._next_id = 0

    def _fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _ensure_id(self, t: Tensor) -> int:
        if t._tape is not self:
            t._tape = self
            t.node_id = self._fresh_id()
            self.leaves[t.node_id] = t
        return t.node_id

    def record(self, kind, inputs: Sequence[Tensor], out: Tensor, saved, meta) -> None:
        input_ids = tuple(self._ensure_id(t) for t in inputs)
        out._tape = self
        out.node_id = self._fresh_id()
        self.records.append(TapeRecord(kind, input_ids, out.node_id, saved, meta))

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False


def _active_tape() -> Optional[Tape]:
    return getattr(_state, "tape", None)


def _active_meter() -> Optional[FlopMeter]:
    return getattr(_state, "meter", None)


def _emit(kind, out_data, inputs, saved=None, meta=None, madds=0, transcendentals=0) -> Tensor:
    meter = _active_meter()
    if meter is not None and (madds or transcendentals):
        meter.add(madds, transcendentals)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.record(kind, inputs, out, saved, meta or {})
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _check_broadcast(a_shape, b_shape, op):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + float(b)
        return _emit("add_scalar", out, [a], saved=(a.shape,),
                     meta={"n": out.size}, madds=out.size)
    shape = _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data
    return _emit("add", out, [a, b], saved=(a.shape, b.shape),
                 meta={"n": out.size}, madds=int(np.prod(shape)) if shape else 1)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    shape = _check_broadcast(a.shape, b.shape, "sub")
    out = a.data - b.data
    return _emit("sub", out, [a, b], saved=(a.shape, b.shape),
                 meta={"n": out.size}, madds=int(np.prod(shape)) if shape else 1)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data * float(b)
        return _emit("mul_scalar", out, [a], saved=(float(b),),
                     meta={"n": out.size}, madds=out.size)
    _check_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data
    return _emit("mul", out, [a, b], saved=(a.data, b.data),
                 meta={"n": out.size}, madds=out.size)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _check_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data
    return _emit("div", out, [a, b], saved=(a.data, b.data),
                 meta={"n": out.size}, transcendentals=out.size)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims disagree for {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    return _emit("matmul", out, [a, b], saved=(a.data, b.data),
                 meta={"m": m, "n": n, "k": k, "batch": batch},
                 madds=batch * m * n * k)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (weight transpose / batched matrix transpose)."""
    if a.ndim < 2:
        raise ShapeMismatchError(f"transpose: needs >=2-d, got {a.shape}")
    return _emit("transpose", _swap_last(a.data), [a], saved=None, meta={})


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return _emit("reshape", out, [a], saved=(a.shape,), meta={})


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return _emit("concat", out, list(tensors), saved=(axis, sizes), meta={})


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    out = a.data[tuple(idx)].copy()
    return _emit("narrow", out, [a], saved=(a.shape, axis, start, length), meta={})


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _emit("relu", out, [a], saved=(a.data > 0.0,), meta={})


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit("sqrt", out, [a], saved=(out,), meta={"n": out.size},
                 transcendentals=out.size)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)
    return _emit("sum", out, [a], saved=(a.shape, axis, keepdims),
                 meta={"n_in": a.size, "n_out": out.size},
                 madds=a.size - out.size)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)
    return _emit("mean", out, [a], saved=(a.shape, axis, keepdims, count),
                 meta={"n_in": a.size, "n_out": out.size},
                 madds=a.size)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``-inf`` entries (mask sentinels) map to exactly 0.  A slice whose
    entries are all ``-inf`` raises, since no distribution exists there.
    """
    x = a.data
    hi = x.max(axis=axis, keepdims=True)
    if np.isneginf(hi).any():
        raise ValueError("fully masked softmax slice")
    e = np.exp(x - hi)
    out = e / e.sum(axis=axis, keepdims=True)
    n = out.size
    slices = n // out.shape[axis]
    return _emit("softmax", out, [a], saved=(out, axis),
                 meta={"n": n, "slices": slices},
                 madds=2 * n - slices, transcendentals=2 * n)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = a.data * keep
    return _emit("dropout", out, [a], saved=(keep,), meta={})


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ w + bias.  Parameter cost d_in*d_out + d_out; charged via matmul/add."""
    out = matmul(x, w)
    if bias is not None:
        out = add(out, bias)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy from raw logits, mean over all entries.

    Stable fused form max(x,0) - x*t + log(1 + exp(-|x|)); targets are
    constants in [0, 1].
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeMismatchError(f"bce targets {t.shape} != logits {logits.shape}")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("bce targets must lie in [0, 1]")
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean())
    n = x.size
    return _emit("bce_with_logits", out, [logits], saved=(x, t, n),
                 meta={"n": n}, madds=3 * n, transcendentals=2 * n)


# ---------------------------------------------------------------------------
# backward rules (vector-Jacobian products), dispatched by record kind
# ---------------------------------------------------------------------------

def _vjp_add(saved, g):
    a_shape, b_shape = saved
    return (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))


def _vjp_sub(saved, g):
    a_shape, b_shape = saved
    return (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape))


def _vjp_add_scalar(saved, g):
    (a_shape,) = saved
    return (_unbroadcast(g, a_shape),)


def _vjp_mul(saved, g):
    a, b = saved
    return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _vjp_mul_scalar(saved, g):
    (c,) = saved
    return (g * c,)


def _vjp_div(saved, g):
    a, b = saved
    return (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape))


def _vjp_matmul(saved, g):
    a, b = saved
    ga = np.matmul(g, _swap_last(b))
    gb = np.matmul(_swap_last(a), g)
    return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))


def _vjp_transpose(saved, g):
    return (_swap_last(g),)


def _vjp_reshape(saved, g):
    (a_shape,) = saved
    return (g.reshape(a_shape),)


def _vjp_concat(saved, g):
    axis, sizes = saved
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _vjp_narrow(saved, g):
    a_shape, axis, start, length = saved
    out = np.zeros(a_shape)
    idx = [slice(None)] * len(a_shape)
    idx[axis] = slice(start, start + length)
    out[tuple(idx)] = g
    return (out,)


def _vjp_relu(saved, g):
    (mask,) = saved
    return (g * mask,)


def _vjp_sqrt(saved, g):
    (y,) = saved
    return (g * 0.5 / y,)


def _vjp_sum(saved, g):
    a_shape, axis, keepdims = saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a_shape).copy(),)


def _vjp_mean(saved, g):
    a_shape, axis, keepdims, count = saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a_shape) / count,)


def _vjp_softmax(saved, g):
    y, axis = saved
    inner = (g * y).sum(axis=axis, keepdims=True)
    return ((g - inner) * y,)


def _vjp_dropout(saved, g):
    (keep,) = saved
    return (g * keep,)


def _vjp_bce(saved, g):
    x, t, n = saved
    sig = 1.0 / (1.0 + np.exp(-x))
    return (g * (sig - t) / n,)


VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "add_scalar": _vjp_add_scalar,
    "mul": _vjp_mul,
    "mul_scalar": _vjp_mul_scalar,
    "div": _vjp_div,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "concat": _vjp_concat,
    "narrow": _vjp_narrow,
    "relu": _vjp_relu,
    "sqrt": _vjp_sqrt,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "softmax": _vjp_softmax,
    "dropout": _vjp_dropout,
    "bce_with_logits": _vjp_bce,
}


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf of the tape.

    ``loss`` must be a scalar recorded on a tape.  Calling twice without
    :meth:`Tensor.zero_grad` accumulates, by design.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise RuntimeError("backward on a detached tensor (no tape recorded it)")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        contribs = VJP[rec.kind](rec.saved, g)
        for nid, contrib in zip(rec.input_ids, contribs):
            if contrib is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + contrib
            else:
                grads[nid] = contrib
    for nid, leaf in tape.leaves.items():
        if not leaf.requires_grad:
            continue
        g = grads.get(nid)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64)
        else:
            leaf.grad = leaf.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
