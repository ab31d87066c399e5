"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation that sees an input with ``requires_grad`` set
appends a record to the current thread's tape.  :func:`backward` replays the
tape in reverse order from the loss record, accumulates gradients into the
leaves and then clears the tape.  Graphs are therefore confined to the thread
that built them; concurrent forward passes must run on separate threads.

Broadcasting follows numpy: shapes are right-aligned and an axis of extent 1
(or a missing leading axis) is stretched to match.  Anything else raises
:class:`~galr.errors.DimensionError`.

Two pieces of instrumentation live here because only the primitives know
what they compute:

* :func:`count_ops` tallies multiply-accumulates of every matrix product /
  convolution, plus the element counts seen by softmax and layer norm.
* :func:`tape_activation_elements` sums the sizes of all activations the tape
  currently retains for the backward pass.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NonFiniteError, UsageError

DTYPES = {"f32": np.float32, "f64": np.float64}

_debug_nonfinite = False


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = []
        self.grad_enabled = True
        self.default_dtype = np.dtype(np.float32)
        self.counters = []


_state = _ThreadState()


def set_debug(enabled: bool) -> None:
    """Toggle the check that raises :class:`NonFiniteError` on NaN/Inf outputs."""
    global _debug_nonfinite
    _debug_nonfinite = bool(enabled)


def debug_enabled() -> bool:
    return _debug_nonfinite


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise UsageError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}; only float32/float64")
    return dtype


def get_default_dtype() -> np.dtype:
    return _state.default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _state.default_dtype
    _state.default_dtype = resolve_dtype(dtype)
    try:
        yield
    finally:
        _state.default_dtype = previous


@contextlib.contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@dataclass
class OpCounter:
    """Operation tallies collected while a :func:`count_ops` block is active."""

    macs: int = 0
    softmax_elements: int = 0
    layernorm_elements: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + 4 * self.softmax_elements + 8 * self.layernorm_elements


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    _state.counters.append(counter)
    try:
        yield counter
    finally:
        _state.counters.remove(counter)


def _tally(macs=0, softmax=0, layernorm=0):
    for counter in _state.counters:
        counter.macs += int(macs)
        counter.softmax_elements += int(softmax)
        counter.layernorm_elements += int(layernorm)


def tape_activation_elements() -> int:
    return sum(rec.out.data.size for rec in _state.tape)


def tape_length() -> int:
    return len(_state.tape)


def reset_tape() -> None:
    """Drop the recorded graph without running backward."""
    _state.tape.clear()


class _Record:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tensor:
    """An n-dimensional float32/float64 array that can sit in a gradient graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            dt = resolve_dtype(dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dt = data.dtype
        else:
            dt = _state.default_dtype
        self.data = np.asarray(data, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._record = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}{tag})"

    def backward(self):
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, index: getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _scalar_error(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def parameter(data, dtype=None, name=None) -> Tensor:
    if isinstance(data, np.ndarray):
        data = data.copy()
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def record_op(op: str, data: np.ndarray, inputs, backward) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(grad_out, grads)`` must push input gradients through
    ``grads.add(tensor, g)`` / ``grads.add_at(tensor, index, g)``.
    """
    if _debug_nonfinite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._record = None
    out.requires_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        rec = _Record(op, tuple(inputs), out, backward)
        _state.tape.append(rec)
        out._record = rec
    return out


class GradAccumulator:
    """Accumulates gradients during one backward sweep.

    Buffers first received from an op are borrowed; they get copied before
    any in-place accumulation so no op's saved array is ever mutated.
    """

    def __init__(self):
        self._owned = set()
        self.leaves = {}

    def add(self, t: Tensor, g) -> None:
        if not t.requires_grad:
            return
        if t._record is None:
            self.leaves[id(t)] = t
        if t.grad is None:
            t.grad = g
        elif id(t) in self._owned:
            t.grad += g
        else:
            t.grad = t.grad + g
            self._owned.add(id(t))

    def add_at(self, t: Tensor, index, g) -> None:
        if not t.requires_grad:
            return
        if t._record is None:
            self.leaves[id(t)] = t
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
            self._owned.add(id(t))
        elif id(t) not in self._owned:
            t.grad = np.array(t.grad, dtype=t.data.dtype)
            self._owned.add(id(t))
        if _is_basic_index(index):
            t.grad[index] += g
        else:
            np.add.at(t.grad, index, g)

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._owned


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on, then clear the tape."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    rec = loss._record
    if rec is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = _state.tape
    for stop in range(len(tape) - 1, -1, -1):
        if tape[stop] is rec:
            break
    else:
        raise UsageError("loss graph has already been consumed by an earlier backward()")
    grads = GradAccumulator()
    grads.add(loss, seed)
    for r in reversed(tape[: stop + 1]):
        g = r.out.grad
        if g is None:
            continue
        r.backward(g, grads)
        r.out.grad = None
    tape.clear()
    for leaf in grads.leaves.values():
        if not grads.owns(leaf) and leaf.grad is not None:
            leaf.grad = np.array(leaf.grad, dtype=leaf.data.dtype)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    a = a if isinstance(a, Tensor) else as_tensor(a, like=b)
    b = b if isinstance(b, Tensor) else as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g, grads):
        grads.add(a, _unbroadcast(g, a.shape))
        grads.add(b, _unbroadcast(g, b.shape))

    return record_op("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g, grads):
        grads.add(a, _unbroadcast(g, a.shape))
        grads.add(b, _unbroadcast(-g, b.shape))

    return record_op("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g, grads):
        if a.requires_grad:
            grads.add(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            grads.add(b, _unbroadcast(g * a.data, b.shape))

    return record_op("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def bw(g, grads):
        if a.requires_grad:
            grads.add(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            grads.add(b, _unbroadcast(-g * out / b.data, b.shape))

    return record_op("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda g, grads: grads.add(a, -g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record_op("tanh", y, (a,), lambda g, grads: grads.add(a, g * (1 - y * y)))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form stays finite for any input
    y = 0.5 * (1 + np.tanh(0.5 * a.data))
    return record_op("sigmoid", y, (a,), lambda g, grads: grads.add(a, g * y * (1 - y)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op("relu", np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g, grads: grads.add(a, g * mask))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record_op("exp", y, (a,), lambda g, grads: grads.add(a, g * y))


def log(a: Tensor) -> Tensor:
    return record_op("log", np.log(a.data), (a,), lambda g, grads: grads.add(a, g / a.data))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch a pointwise op by name (``add``, ``mul``, ``tanh``, ``sigmoid``, ``relu``, ...)."""
    if op in _BINARY:
        if b is None:
            raise UsageError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise UsageError(f"{op} takes a single operand")
        return _UNARY[op](as_tensor(a))
    raise UsageError(f"unknown elementwise op {op!r}")


def where(condition, a, b) -> Tensor:
    """Select from ``a`` where ``condition`` holds, else from ``b``; no gradient to the mask."""
    a, b = _binary_operands(a, b)
    cond = np.asarray(condition, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bw(g, grads):
        if a.requires_grad:
            grads.add(a, _unbroadcast(np.where(cond, g, 0), a.shape))
        if b.requires_grad:
            grads.add(b, _unbroadcast(np.where(cond, 0, g), b.shape))

    return record_op("where", out.astype(a.dtype, copy=False), (a, b), bw)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim} axes")
    return tuple(sorted(int(a) % ndim for a in axes))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, grads):
        if not keepdims:
            g = np.expand_dims(g, axes)
        grads.add(a, np.broadcast_to(g, a.shape))

    return record_op("sum", np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = math.prod(a.shape[i] for i in axes)
    return tsum(a, axes, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with >= 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch shapes do not broadcast: {a.shape} @ {b.shape}") from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _tally(macs=math.prod(batch) * m * k * n)
    out = np.matmul(a.data, b.data)

    def bw(g, grads):
        if a.requires_grad:
            grads.add(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            grads.add(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return record_op("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in); leading axes of ``x`` are batch."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    rows = x.size // x.shape[-1]
    _tally(macs=rows * weight.shape[0] * weight.shape[1])
    out = np.matmul(x.data, weight.data.T)
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, grads):
        if x.requires_grad:
            grads.add(x, np.matmul(g, weight.data))
        if weight.requires_grad or (bias is not None and bias.requires_grad):
            g2 = g.reshape(-1, g.shape[-1])
            if weight.requires_grad:
                grads.add(weight, g2.T @ x.data.reshape(-1, x.shape[-1]))
            if bias is not None:
                grads.add(bias, g2.sum(axis=0))

    return record_op("linear", out, inputs, bw)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return record_op("reshape", out, (a,), lambda g, grads: grads.add(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record_op("transpose", out, (a,), lambda g, grads: grads.add(a, g.transpose(inverse)))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if not _is_basic_index(index):
        out = np.array(out)
    return record_op("getitem", out, (a,), lambda g, grads: grads.add_at(a, index, g))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, grads):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            grads.add(t, piece)

    return record_op("concat", out, tensors, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def bw(g, grads):
        for i, t in enumerate(tensors):
            grads.add(t, np.take(g, i, axis=axis))

    return record_op("stack", out, tensors, bw)


# ---------------------------------------------------------------- network primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    axis = _norm_axes(axis, x.ndim)[0]
    _tally(softmax=x.size)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def bw(g, grads):
        grads.add(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return record_op("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axes=(-1,), eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance over ``axes``, then scale and shift.

    ``gain`` and ``bias`` have the extents of the normalized axes, in order.
    """
    axes = _norm_axes(axes, x.ndim)
    extents = tuple(x.shape[i] for i in axes)
    if gain.shape != extents or bias.shape != extents:
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match axes extents {extents}")
    bshape = tuple(x.shape[i] if i in axes else 1 for i in range(x.ndim))
    gb = gain.data.reshape(bshape)
    n = math.prod(extents)
    _tally(layernorm=x.size)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gb + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i not in axes)

    def bw(g, grads):
        if gain.requires_grad:
            grads.add(gain, (g * xhat).sum(axis=other).reshape(extents))
        if bias.requires_grad:
            grads.add(bias, g.sum(axis=other).reshape(extents))
        if x.requires_grad:
            dxhat = g * gb
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            grads.add(x, inv * (dxhat - s1 / n - xhat * s2 / n))

    return record_op("layer_norm", out.astype(x.dtype, copy=False), (x, gain, bias), bw)


def conv1d(x: Tensor, weight: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation. ``x``: (Cin, L) or (B, Cin, L); ``weight``: (Cout, Cin, M)."""
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or weight.ndim != 3 or xd.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1:
        raise UsageError(f"conv1d: stride must be >= 1, got {stride}")
    nb, cin, length = xd.shape
    cout, _, width = weight.shape
    if length < width:
        raise DimensionError(f"conv1d: input length {length} shorter than kernel {width}")
    n_out = (length - width) // stride + 1
    _tally(macs=nb * cout * cin * width * n_out)
    frames = np.lib.stride_tricks.sliding_window_view(xd, width, axis=-1)[:, :, : (n_out - 1) * stride + 1 : stride]
    frames = frames.transpose(0, 2, 1, 3).reshape(nb, n_out, cin * width)
    wmat = weight.data.reshape(cout, cin * width)
    out = np.matmul(frames, wmat.T)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    if unbatched:
        out = out[0]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, grads):
        gb = g[None] if unbatched else g
        gt = gb.transpose(0, 2, 1)  # (B, L', Cout)
        if weight.requires_grad:
            gw = np.tensordot(gt, frames, axes=([0, 1], [0, 1]))
            grads.add(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            grads.add(bias, gb.sum(axis=(0, 2)))
        if x.requires_grad:
            dframes = np.matmul(gt, wmat).reshape(nb, n_out, cin, width)
            dx = np.zeros_like(xd)
            span = (n_out - 1) * stride + 1
            for m in range(width):
                dx[:, :, m : m + span : stride] += dframes[:, :, :, m].transpose(0, 2, 1)
            grads.add(x, dx[0] if unbatched else dx)

    return record_op("conv1d", out, inputs, bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity (no op recorded) outside training or at rate 0."""
    if not training or rate <= 0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return record_op("dropout", x.data * keep, (x,), lambda g, grads: grads.add(x, g * keep))
