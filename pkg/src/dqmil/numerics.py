"""Dense arrays with tape-based reverse-mode differentiation.

Every differentiable operation appends one record to the active :class:`Graph`
(when at least one input requires a gradient).  :func:`backward` replays the
tape in reverse creation order, which is a valid reverse topological order,
accumulates gradients into the leaf tensors and clears the tape.

numpy does the array arithmetic; the graph, the derivative rules and the
gradient bookkeeping live here.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError, ParameterError, StateError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LAYER_NORM_EPS = 1e-5

_PRECISIONS = {"float32": np.float32, "float64": np.float64}


class _Session(threading.local):
    def __init__(self):
        self.dtype = np.float64
        self.grad_enabled = True
        self.graph = Graph()


def get_dtype():
    return _session.dtype


def set_precision(name: str) -> None:
    """Select ``"float32"`` (training) or ``"float64"`` (gradient oracles)."""
    try:
        _session.dtype = _PRECISIONS[name]
    except KeyError:
        raise ParameterError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


@contextlib.contextmanager
def precision(name: str):
    old = _session.dtype
    set_precision(name)
    try:
        yield
    finally:
        _session.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _session.grad_enabled
    _session.grad_enabled = False
    try:
        yield
    finally:
        _session.grad_enabled = old


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable


@dataclass
class Graph:
    records: list = field(default_factory=list)
    generation: int = 0

    def clear(self):
        self.records.clear()
        self.generation += 1


_session = _Session()


def current_graph() -> Graph:
    return _session.graph


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _session.dtype)
        if not all_finite(arr):
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None  # (graph, generation, index) for recorded outputs

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._tape is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _scalar_error(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def all_finite(a) -> bool:
    # any NaN/Inf entry makes the sum non-finite; a finite overflow only costs the slow path
    return math.isfinite(a.sum()) or bool(np.isfinite(a).all())


def _record(op: str, inputs: Sequence[Tensor], out_data, backward_fn) -> Tensor:
    if not all_finite(out_data):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    if _session.grad_enabled and any(t.requires_grad for t in inputs):
        graph = _session.graph
        out.requires_grad = True
        out._tape = (graph, graph.generation, len(graph.records))
        graph.records.append(_Record(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, backward)


def neg(a) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _record("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, backward)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)

    def backward(g):
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", (x,), (x.data * cdf).astype(x.data.dtype), backward)


def log_floor(p, floor=1e-12) -> Tensor:
    """Natural log of ``max(p, floor)``; no gradient where the floor is active."""
    clipped = np.maximum(p.data, floor)

    def backward(g):
        return (np.where(p.data > floor, g / clipped, 0.0),)

    return _record("log_floor", (p,), np.log(clipped), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_all(x) -> Tensor:
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape),))


def sum_axis(x, axis, keepdims=False) -> Tensor:
    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum_axis", (x,), x.data.sum(axis=axis, keepdims=keepdims), backward)


def mean_axis(x, axis=0, keepdims=False) -> Tensor:
    n = x.shape[axis]
    if n == 0:
        raise DimensionError(f"mean over empty axis {axis} of shape {x.shape}")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return _record("mean_axis", (x,), x.data.mean(axis=axis, keepdims=keepdims), backward)


def l2_norm_sq(x) -> Tensor:
    return _record("l2_norm_sq", (x,), np.asarray((x.data * x.data).sum()), lambda g: (2.0 * g * x.data,))


def reshape(x, shape) -> Tensor:
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (x,), np.asarray(x.data[index]), backward)


def concat(tensors: Sequence[Tensor], axis=-1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tensors, out, backward)


def detach(x) -> Tensor:
    return x.detach()


# ---------------------------------------------------------------------------
# linear algebra, softmax, normalization
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``. A 1-D ``a`` is a row vector."""
    if a.data.ndim == 1 and b.data.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), a.data @ b.data, backward)


def _softmax_array(z, temperature):
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def stable_softmax(x, temperature=1.0) -> Tensor:
    """Softmax over the trailing axis of ``x / temperature``."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    p = _softmax_array(x.data, temperature)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) / temperature,)

    return _record("softmax", (x,), p, backward)


def log_softmax_array(z, temperature=1.0):
    """Non-differentiable log-softmax used for ranking and entropies."""
    s = np.asarray(z, dtype=np.float64) / temperature
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty feature axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record("layer_norm", (x, gain, bias), out, backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise StateError("loss is not connected to any trainable tensor")
    graph, generation, index = loss._tape
    if generation != graph.generation:
        raise StateError("graph already consumed; run a new forward pass before calling backward again")

    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(graph.records[: index + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    graph.clear()


# ---------------------------------------------------------------------------
# randomness and initialisation
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream: identical output on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def trunc_normal(shape, rng, mean=0.0, std=0.02, lo=-2.0, hi=2.0) -> np.ndarray:
    """Rejection-sample N(mean, std) restricted to ``[lo, hi]``."""
    if not lo < hi:
        raise ParameterError(f"truncation bounds need lo < hi, got [{lo}, {hi}]")
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    n = int(np.prod(shape, dtype=np.int64))
    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        draw = rng.normal(mean, std, size=n - filled)
        keep = draw[(draw >= lo) & (draw <= hi)]
        out[filled: filled + keep.size] = keep
        filled += keep.size
    return out.reshape(shape)


def trunc_normal_init(shape, rng, mean=0.0, std=0.02, lo=-2.0, hi=2.0, name=None) -> Tensor:
    return parameter(trunc_normal(shape, rng, mean, std, lo, hi), name=name)
