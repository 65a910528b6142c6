"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays, float32 by default (training) or float64 where the
caller asks for it (all gradient checks run in float64). Differentiable ops
append records to a thread-local :class:`Tape`; ``Tape.backward`` replays the
records in exact reverse execution order and accumulates gradients additively
into the leaves. A tape serves one forward/backward pass -- graphs are not
retained across optimizer steps.

Outside any ``with Tape():`` block ops run in plain inference mode and record
nothing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor", "Tape", "Rng", "ShapeError", "NonFiniteError",
    "set_default_dtype", "default_dtype", "set_debug", "debug_enabled",
    "as_tensor", "add", "sub", "mul", "neg", "scale", "matmul", "transpose",
    "swapaxes", "reshape", "concat", "slice_along", "index_select", "expand",
    "softmax", "relu", "leaky_relu", "prelu", "activation", "sigmoid",
    "sqrt", "power", "absolute", "l2norm", "tsum", "mean", "dropout",
    "linear", "backward", "zero_grads", "grad_check", "GradCheckReport",
    "save_tensors", "load_tensors",
]

_tls = threading.local()
_default = {"dtype": np.float32, "debug": False}


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when a tensor holds NaN or Inf."""


def set_default_dtype(dtype):
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _default["dtype"] = np.dtype(dtype).type


def default_dtype():
    return _default["dtype"]


def set_debug(flag):
    """Enable fail-fast NaN/Inf checks on every created tensor."""
    _default["debug"] = bool(flag)


def debug_enabled():
    return _default["debug"]


class Tensor:
    """N-dimensional value, optionally tracked for gradients.

    ``requires_grad`` marks a leaf whose gradient is wanted; ``grad`` stays
    None until a backward pass touches it, and accumulates across passes
    until reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw data, not another Tensor")
        if isinstance(data, np.generic):
            data = np.asarray(data)  # numpy scalars keep their dtype
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        if debug_enabled() and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return np.array(self.data)

    def zero_grad(self):
        self.grad = None

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def __add__(self, other):
        return add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other, like=self))

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, as_tensor(other, like=self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other, like=self))

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("tensor division only supports scalars; use power() for elementwise")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, like=None, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and like is not None:
        dtype = like.data.dtype
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Record:
    out: Tensor
    fn: object  # callable: grad ndarray -> iterable of (Tensor, ndarray)


class Tape:
    """Ordered record of executed differentiable ops for one forward pass."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_tls, "tapes", None)
        if stack is None:
            stack = _tls.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tapes.pop()
        return False

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        ``loss`` must be scalar. Records are replayed in exact reverse
        execution order; a second call accumulates on top of the first.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf and loss.requires_grad:
            seed = grads[id(loss)]
            loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gin in rec.fn(g):
                if not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = np.array(gin) if inp.grad is None else inp.grad + gin
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gin if prev is None else prev + gin


def _active_tape():
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


def backward(loss):
    """Backward through the currently active tape."""
    t = _active_tape()
    if t is None:
        raise RuntimeError("backward() called with no active Tape")
    t.backward(loss)


def zero_grads(params):
    for item in params:
        t = item[1] if isinstance(item, tuple) else item
        t.grad = None


def _make(data, inputs, fn):
    tape = _active_tape()
    track = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(data)
    out.is_leaf = False
    out.requires_grad = track
    if track:
        tape.records.append(_Record(out, fn))
    if debug_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and shape ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)

    def bw(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)

    def bw(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape))]

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)

    def bw(g):
        return [(a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape))]

    return _make(a.data * b.data, (a, b), bw)


def neg(x):
    return scale(x, -1.0)


def scale(x, c):
    x = as_tensor(x)
    c = float(c)

    def bw(g):
        return [(x, g * c)]

    return _make(x.data * np.asarray(c, dtype=x.data.dtype), (x,), bw)


def matmul(a, b):
    """Batched matrix product a[..., m, p] @ b[..., p, n].

    Leading dimensions broadcast under numpy rules; gradients are summed back
    over broadcast dimensions.
    """
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return [(a, _unbroadcast(ga, a.data.shape)), (b, _unbroadcast(gb, b.data.shape))]

    return _make(a.data @ b.data, (a, b), bw)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return [(x, np.transpose(g, inv))]

    return _make(np.transpose(x.data, axes), (x,), bw)


def swapaxes(x, i, j):
    axes = list(range(as_tensor(x).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(x, axes)


def reshape(x, shape):
    x = as_tensor(x)
    orig = x.data.shape

    def bw(g):
        return [(x, g.reshape(orig))]

    return _make(x.data.reshape(shape), (x,), bw)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(
                "concat extents differ off axis %d: %s" % (axis, [t.shape for t in tensors]))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, offsets, axis=axis)
        return list(zip(tensors, pieces))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def slice_along(x, axis, start, stop):
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        z = np.zeros_like(x.data)
        z[idx] = g
        return [(x, z)]

    return _make(x.data[idx].copy(), (x,), bw)


def index_select(x, axis, indices):
    """Gather along ``axis``; duplicate indices accumulate gradient additively."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        z = np.zeros_like(x.data)
        sel = (slice(None),) * axis + (indices,)
        np.add.at(z, sel, g)
        return [(x, z)]

    return _make(np.take(x.data, indices, axis=axis), (x,), bw)


def expand(x, axis, n):
    """Repeat a length-1 axis ``n`` times; gradient sums back over it."""
    x = as_tensor(x)
    if x.shape[axis] != 1:
        raise ShapeError(f"expand needs extent 1 on axis {axis}, got {x.shape}")

    def bw(g):
        return [(x, g.sum(axis=axis, keepdims=True))]

    return _make(np.repeat(x.data, n, axis=axis), (x,), bw)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def bw(g):
        if axis is None:
            return [(x, np.broadcast_to(g, x.data.shape))]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(x, np.broadcast_to(gg, x.data.shape))]

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Nonlinearities


def softmax(x, axis=-1):
    """Numerically stabilized softmax along ``axis``; rows sum to 1."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return [(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))]

    return _make(y, (x,), bw)


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        return [(x, g * pos)]

    return _make(np.where(pos, x.data, 0.0).astype(x.data.dtype), (x,), bw)


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        return [(x, g * np.where(pos, 1.0, slope).astype(x.data.dtype))]

    return _make(np.where(pos, x.data, slope * x.data).astype(x.data.dtype), (x,), bw)


def prelu(x, slope):
    """PReLU with a learnable slope tensor (scalar shape)."""
    x, slope = as_tensor(x), as_tensor(slope)
    pos = x.data > 0
    a = slope.data

    def bw(g):
        gx = g * np.where(pos, 1.0, a).astype(x.data.dtype)
        gs = _unbroadcast(g * np.where(pos, 0.0, x.data), slope.data.shape)
        return [(x, gx), (slope, gs)]

    return _make(np.where(pos, x.data, a * x.data).astype(x.data.dtype), (x, slope), bw)


def activation(x, kind, slope=None):
    if kind == "relu":
        return relu(x)
    if kind == "leakyrelu":
        return leaky_relu(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope tensor")
        return prelu(x, slope)
    raise ValueError(f"unknown activation kind {kind!r}")


def sigmoid(x):
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)

    def bw(g):
        return [(x, g * y * (1.0 - y))]

    return _make(y, (x,), bw)


def sqrt(x):
    x = as_tensor(x)
    y = np.sqrt(x.data)

    def bw(g):
        return [(x, g * 0.5 / y)]

    return _make(y, (x,), bw)


def power(x, p):
    x = as_tensor(x)
    p = float(p)

    def bw(g):
        return [(x, g * p * x.data ** (p - 1.0))]

    return _make(x.data ** p, (x,), bw)


def absolute(x):
    x = as_tensor(x)
    s = np.sign(x.data)  # sign(0) = 0: subgradient at the kink

    def bw(g):
        return [(x, g * s)]

    return _make(np.abs(x.data), (x,), bw)


def l2norm(x, axis=-1, keepdims=False):
    """Euclidean norm along ``axis`` with zero subgradient at the origin."""
    x = as_tensor(x)
    n = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    unit = x.data / safe

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(x, gg * unit)]

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (x,), bw)


def dropout(x, rate, training, rng):
    """Zero each element w.p. ``rate`` and rescale survivors; identity in eval."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.gen.random(x.shape) >= rate).astype(x.data.dtype)
    s = 1.0 / (1.0 - rate)

    def bw(g):
        return [(x, g * keep * s)]

    return _make(x.data * keep * np.asarray(s, dtype=x.data.dtype), (x,), bw)


def linear(x, weight, bias=None):
    """x @ weight.T + bias, with weight shaped (out_features, in_features)."""
    y = matmul(x, transpose(weight))
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# Deterministic RNG


class Rng:
    """Splittable counter-based RNG (Philox keyed by an entropy tuple).

    Streams are independent for distinct entropy tuples, so consumers key
    them as (seed, stream_id, epoch, step, ...) and get bit-reproducible
    draws regardless of execution history.
    """

    def __init__(self, *entropy):
        self.entropy = tuple(int(e) for e in entropy)
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=list(self.entropy))))

    def split(self, *tags):
        return Rng(*self.entropy, *tags)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int = -1
    worst_coord: int = -1
    checked: int = 0
    reason: str = ""

    def __str__(self):
        if self.reason:
            return f"grad_check failed: {self.reason}"
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
                f"(input {self.worst_input}, coord {self.worst_coord}, {self.checked} coords)")


def grad_check(f, inputs, tolerance=1e-5, num_samples=200, seed=0, step=1e-6):
    """Compare reverse-mode gradients of ``f`` against central finite differences.

    ``f`` maps the input tensors to a tensor; it must be deterministic
    (dropout disabled). All inputs must be float64. The check projects the
    output onto a fixed random direction and compares d(projection)/d(input)
    on up to ``num_samples`` coordinates sampled across all inputs. The
    reported error is |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
    rng = np.random.default_rng(seed)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tp:
            out = f(*inputs)
            proj = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
            loss = tsum(mul(out, proj))
            tp.backward(loss)
    except NonFiniteError as e:
        return GradCheckReport(False, float("inf"), reason=str(e))
    if not np.isfinite(loss.data):
        return GradCheckReport(False, float("inf"), reason="non-finite forward value")
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    if any(not np.all(np.isfinite(a)) for a in analytic):
        return GradCheckReport(False, float("inf"), reason="non-finite analytic gradient")

    sizes = [t.size for t in inputs]
    total = sum(sizes)
    n_check = min(num_samples, total)
    flat_choice = rng.choice(total, size=n_check, replace=False)

    def eval_proj():
        val = f(*inputs)
        return float((val.data * proj.data).sum())

    worst = (0.0, -1, -1)
    for flat in flat_choice:
        i = 0
        while flat >= sizes[i]:
            flat -= sizes[i]
            i += 1
        x = inputs[i].data
        orig = x.flat[flat]
        x.flat[flat] = orig + step
        f_plus = eval_proj()
        x.flat[flat] = orig - step
        f_minus = eval_proj()
        x.flat[flat] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            return GradCheckReport(False, float("inf"), reason="non-finite perturbed forward")
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[i].flat[flat]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
        if rel > worst[0]:
            worst = (rel, i, int(flat))
    return GradCheckReport(worst[0] <= tolerance, worst[0], worst[1], worst[2], n_check)


# ---------------------------------------------------------------------------
# Flat binary tensor container ("HFT1")
#
# Layout: 4 magic bytes, then per-tensor records until EOF. Each record:
#   u64 LE name length, UTF-8 name, u64 LE rank, rank * u64 LE extents,
#   payload as little-endian IEEE-754 float64.
# float32 tensors are widened on write (lossless) and cast back by the owner.

_MAGIC = b"HFT1"


def save_tensors(path, named):
    """Write named tensors/arrays to ``path`` in the flat container format."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for name, value in named.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(len(raw).to_bytes(8, "little"))
            fh.write(raw)
            fh.write(int(arr.ndim).to_bytes(8, "little"))
            for ext in arr.shape:
                fh.write(int(ext).to_bytes(8, "little"))
            fh.write(arr.tobytes())


def load_tensors(source):
    """Read a container written by :func:`save_tensors`; returns name -> float64 array."""
    if isinstance(source, (bytes, bytearray)):
        buf = bytes(source)
    else:
        with open(source, "rb") as fh:
            buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    pos = 4
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"truncated tensor container at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        name_len = int.from_bytes(take(8), "little")
        name = take(name_len).decode("utf-8")
        rank = int.from_bytes(take(8), "little")
        shape = tuple(int.from_bytes(take(8), "little") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = take(count * 8)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out
