"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything in this simulator runs on 64-bit floats: the finite-difference
oracles and the closed-form stability bounds need the headroom, and speed
is not the bottleneck at desk scale. A forward pass records operations on
a per-pass tape; ``backward_pass`` replays the tape once, in reverse, and
then frees it.

Tapes are thread-local: a graph and the tensors attached to it stay on the
worker that recorded them, while detached tensors are plain immutable
values that can be shared freely.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

# tanh-approximation GELU constants, fixed for cross-run reproducibility
GELU_COEFF = 0.044715
GELU_SCALE = 0.7978845608028654  # sqrt(2/pi)

_state = threading.local()


def _st():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.graph = None
    return _state


class no_grad:
    """Context manager that disables tape recording (teacher/eval forwards)."""

    def __enter__(self):
        st = _st()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _st().grad_enabled = self._prev
        return False


class enable_grad:
    """Re-enable recording inside a ``no_grad`` region (inversion needs it)."""

    def __enter__(self):
        st = _st()
        self._prev = st.grad_enabled
        st.grad_enabled = True
        return self

    def __exit__(self, *exc):
        _st().grad_enabled = self._prev
        return False


class GraphError(RuntimeError):
    pass


class _Record:
    """One recorded operation: inputs, output, and its gradient rule."""

    __slots__ = ("tag", "inputs", "output", "grad_fn")

    def __init__(self, tag, inputs, output, grad_fn):
        self.tag = tag
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Graph:
    """Tape of operations for one forward pass, in recording order.

    Operands are always recorded before the operation that consumes them;
    ``backward_pass`` visits each record exactly once, in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self):
        return len(self.records)


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked on a tape.

    ``grad`` is populated by ``backward_pass`` for leaves with
    ``requires_grad`` (and for intermediates flagged ``retain_grad``).
    Accumulation across backward calls is rejected; callers zero grads
    explicitly between phases.
    """

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.graph: Graph | None = None
        self.retain_grad = False

    # -- basic introspection -------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.graph is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("tensor division only supports scalars")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.graph is not None


def apply_op(tag: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a computed value as a Tensor, recording it if any input is tracked.

    ``grad_fn`` maps the output gradient to one gradient (or None) per input.
    This is the extension point other modules use for custom differentiable
    operations.
    """
    st = _st()
    out = Tensor(out_data)
    if st.grad_enabled and any(_tracked(t) for t in inputs):
        if st.graph is None or st.graph.consumed:
            st.graph = Graph()
        graph = st.graph
        for t in inputs:
            if t.graph is not None and t.graph is not graph and not t.graph.consumed:
                raise GraphError(f"operand of '{tag}' belongs to a different live graph")
        out.graph = graph
        out.requires_grad = True
        graph.records.append(_Record(tag, tuple(inputs), out, grad_fn))
    return out


def backward_pass(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked leaf with d(loss)/d(leaf).

    The loss must be scalar and attached to a nonempty graph. The tape is
    freed afterwards; calling backward twice on the same graph raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward_pass needs a scalar loss, got shape {loss.data.shape}")
    graph = loss.graph
    if graph is None or not graph.records:
        raise GraphError("backward_pass on an empty graph (loss is not attached to any recorded op)")
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward_pass; rebuild the forward pass")

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(graph.records):
        g_out = acc.pop(id(rec.output), None)
        if g_out is None:
            continue
        if rec.output.retain_grad:
            rec.output.grad = g_out
        grads = rec.grad_fn(g_out)
        for t, g in zip(rec.inputs, grads):
            if g is None or not _tracked(t):
                continue
            key = id(t)
            if key in acc:
                acc[key] = acc[key] + g
            else:
                acc[key] = g
                by_id[key] = t

    for key, g in acc.items():
        t = by_id[key]
        if (t.requires_grad and t.graph is None) or t.retain_grad:
            if t.grad is not None:
                raise GraphError(
                    "grad already populated (accumulation across backward calls is "
                    "disallowed; call zero_grad first)")
            t.grad = g

    graph.consumed = True
    graph.records.clear()
    if _st().graph is graph:
        _st().graph = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and structural ops ---------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return apply_op("add", (a, b), out, grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return apply_op("sub", (a, b), out, grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return apply_op("mul", (a, b), out, grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return apply_op("matmul", (a, b), ad @ bd, grad_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inv) if inv is not None else g.T,)

    return apply_op("transpose", (a,), a.data.transpose(axes), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return apply_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"slice axis {axis} invalid for ndim {nd}")
    axis = axis % nd
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(nd))
    shape = a.data.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return apply_op("slice", (a,), a.data[idx].copy(), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return apply_op("concat", tuple(tensors), out, grad_fn)


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.data.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return apply_op("sum", (a,), a.data.sum(axis=axis), grad_fn)


def tmean(a: Tensor, axis=None) -> Tensor:
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape) / n,)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return apply_op("mean", (a,), a.data.mean(axis=axis), grad_fn)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    """Natural log; domain is strictly positive values."""
    ad = a.data
    return apply_op("log", (a,), np.log(ad), lambda g: (g / ad,))


def gelu(a: Tensor) -> Tensor:
    """GELU via the tanh approximation (fixed constants, reproducible)."""
    x = a.data
    inner = GELU_SCALE * (x + GELU_COEFF * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x ** 2)
        deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner
        return (g * deriv,)

    return apply_op("gelu", (a,), out, grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along ``axis`` with max subtraction for stability."""
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"softmax axis {axis} invalid for ndim {nd}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", (a,), out, grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"log_softmax axis {axis} invalid for ndim {nd}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", (a,), out, grad_fn)


def masked_softmax(a: Tensor, active: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``active`` positions along ``axis``.

    Inactive positions get exactly 0.0 in the output and contribute nothing
    to the normalization; each slice must keep at least one active position.
    """
    active = np.asarray(active, dtype=bool)
    nd = a.data.ndim
    axis = axis % nd
    if active.shape != (a.data.shape[axis],):
        raise ValueError(f"mask length {active.shape} does not match axis size {a.data.shape[axis]}")
    if not active.any():
        raise ValueError("masked_softmax needs at least one active position")
    mshape = [1] * nd
    mshape[axis] = active.size
    m = active.reshape(mshape)

    scores = np.where(m, a.data, -np.inf)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("masked_softmax", (a,), out, grad_fn)


def mask_rows(a: Tensor, active: np.ndarray) -> Tensor:
    """Zero the rows of a 2-D tensor where ``active`` is False.

    Both the forward value and the backward gradient are multiplied by the
    mask, so masked rows carry exactly zero and pass back exactly zero.
    """
    active = np.asarray(active, dtype=bool)
    if a.data.ndim != 2 or active.shape != (a.data.shape[0],):
        raise ValueError(f"mask_rows: mask {active.shape} vs tensor {a.data.shape}")
    col = active.astype(np.float64)[:, None]
    return apply_op("mask_rows", (a,), a.data * col, lambda g: (g * col,))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layernorm eps must be > 0")
    if x.data.ndim != 2 or gamma.data.shape != (x.data.shape[1],) or beta.data.shape != (x.data.shape[1],):
        raise ValueError(
            f"layernorm shapes: x {x.data.shape}, gamma {gamma.data.shape}, beta {beta.data.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data
    d = xd.shape[1]

    def grad_fn(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return apply_op("layernorm", (x, gamma, beta), out, grad_fn)


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label]; gradient is softmax(logits) - onehot."""
    k = logits.data.shape[-1]
    if logits.data.ndim != 1:
        raise ValueError(f"cross_entropy_logits expects a logit vector, got {logits.data.shape}")
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    shifted = logits.data - logits.data.max()
    lse = np.log(np.exp(shifted).sum())
    out = np.asarray(lse - shifted[label])
    p = np.exp(shifted - lse)

    def grad_fn(g):
        d = p.copy()
        d[label] -= 1.0
        return (d * g,)

    return apply_op("cross_entropy", (logits,), out, grad_fn)


# -- gradient oracle --------------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float = 1e-5) -> float:
    """Worst relative error between autodiff and central differences.

    ``f`` must be scalar-valued. The relative error uses an absolute floor
    of 1e-8 in the denominator so near-zero gradients compare sanely.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = f(probe)
    if loss.data.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued function")
    if loss.graph is not None:
        backward_pass(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(probe).item()
            flat[i] = orig - h
            fm = f(probe).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


# -- binary serialization ----------------------------------------------------

def tensor_to_bytes(t: Tensor) -> bytes:
    """Little-endian: u32 rank, u32 per-dim sizes, then f64 payload."""
    arr = t.data.astype("<f8", copy=False)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()  # tobytes always emits row-major order


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one serialized tensor; returns (tensor, next offset)."""
    if len(buf) - offset < 4:
        raise ValueError("truncated tensor record: missing rank")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) - offset < 4 * rank:
        raise ValueError("truncated tensor record: missing dims")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = 8 * count
    if len(buf) - offset < nbytes:
        raise ValueError("truncated tensor record: missing payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims)
    return Tensor(data.astype(np.float64)), offset + nbytes
