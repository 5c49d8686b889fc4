"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays in channels-first layout. Every op accepts either a
single sample (``c x h x w``) or a batch with a leading sample axis; the
backward rules are written once for the batched form.

Broadcasting is deliberately narrow: tensors combine elementwise only with
equal shapes or with Python scalars. Per-channel vectors go through
:func:`add_channel` / :func:`channel_scale`, per-position maps through
:func:`spatial_scale`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

_ids = itertools.count(1)

Scalar = Union[int, float]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the op."""


class DomainError(ValueError):
    """Input lies outside the op's mathematical domain."""


class ContractError(ValueError):
    """Caller broke an op precondition."""


class Tensor:
    """An immutable array value, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "tape", "id", "name")

    def __init__(self, data, tape: Optional["Tape"] = None, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64 or not isinstance(data, (np.ndarray, np.floating)):
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.tape = tape
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    inputs: Tuple[int, ...]
    output: int
    backward: BackwardFn
    op: str


@dataclass
class Tape:
    """Ordered record of operations; creation order is a topological order."""

    nodes: List[Node] = field(default_factory=list)
    leaves: Dict[int, Tensor] = field(default_factory=dict)
    shapes: Dict[int, Tuple[int, ...]] = field(default_factory=dict)

    def watch(self, array, name: Optional[str] = None, dtype=None) -> Tensor:
        """Register ``array`` as a differentiable leaf variable."""
        arr = np.array(array, dtype=dtype if dtype is not None else np.float32, copy=True)
        t = Tensor(arr, self, name)
        self.leaves[t.id] = t
        self.shapes[t.id] = t.shape
        return t

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> None:
        out.tape = self
        self.shapes[out.id] = out.shape
        self.nodes.append(Node(tuple(t.id for t in inputs), out.id, backward, op))


class Grad:
    """Gradients keyed by variable id; unknown or untouched ids read as zeros."""

    def __init__(self, values: Dict[int, np.ndarray], shapes: Dict[int, Tuple[int, ...]], dtype):
        self._values = values
        self._shapes = shapes
        self._dtype = dtype

    def __getitem__(self, var: Union[Tensor, int]) -> np.ndarray:
        vid = var.id if isinstance(var, Tensor) else var
        g = self._values.get(vid)
        if g is None:
            shape = var.shape if isinstance(var, Tensor) else self._shapes[vid]
            return np.zeros(shape, dtype=self._dtype)
        return g

    def __contains__(self, var) -> bool:
        vid = var.id if isinstance(var, Tensor) else var
        return vid in self._values


def _tape_of(*ts) -> Optional[Tape]:
    tape = None
    for t in ts:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands were recorded on different tapes")
            tape = t.tape
    return tape


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    tape = _tape_of(*inputs)
    if tape is not None:
        tape.record(out, inputs, backward, op)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(tape: Tape, root: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Grad:
    """Reverse-mode sweep from a scalar ``root``.

    With ``wrt`` given, only nodes lying on a path from those variables to the
    root are visited; gradients for everything else read as zero.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    live: Optional[set] = None
    if wrt is not None:
        live = {t.id for t in wrt}
        for node in tape.nodes:
            if any(i in live for i in node.inputs):
                live.add(node.output)
        if root.id not in live:
            return Grad({}, tape.shapes, root.dtype)
    grads: Dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        if live is None:
            need = tuple(True for _ in node.inputs)
        else:
            need = tuple(i in live for i in node.inputs)
        if not any(need):
            continue
        in_grads = node.backward(g, need)
        for vid, n, gi in zip(node.inputs, need, in_grads):
            if not n or gi is None:
                continue
            prev = grads.get(vid)
            grads[vid] = gi if prev is None else prev + gi
    if live is not None:
        grads = {k: v for k, v in grads.items() if k in live}
    return Grad(grads, tape.shapes, root.dtype)


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return shift(a, b)
    if not isinstance(a, Tensor):
        return shift(b, a)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g, need: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return shift(a, -b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g, need: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g, need: (g * bd if need[0] else None, g * ad if need[1] else None), "mul")


def scale(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return _make(a.data * a.data.dtype.type(s), (a,), lambda g, need: (g * g.dtype.type(s),), "scale")


def shift(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return _make(a.data + a.data.dtype.type(c), (a,), lambda g, need: (g,), "shift")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g, need: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g, need: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(y, (a,), lambda g, need: (g * y * (1 - y),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)

    def bw(g, need):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
        return (g * sig,)

    return _make(y, (a,), bw, "softplus")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise DomainError("exp overflowed")
    return _make(y, (a,), lambda g, need: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(x), (a,), lambda g, need: (g / x,), "log")


def abs_(a: Tensor) -> Tensor:
    x = a.data
    sign = np.sign(x).astype(x.dtype)
    return _make(np.abs(x), (a,), lambda g, need: (g * sign,), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g, need: (g * 2 * x,), "square")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    x = a.data
    mask = x >= lo
    y = np.where(mask, x, x.dtype.type(lo))
    return _make(y, (a,), lambda g, need: (g * mask,), "clamp_min")


def detach(a: Tensor) -> Tensor:
    """Same value, no gradient path."""
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    x = a.data
    y = np.asarray(x.sum(axis=axis), dtype=x.dtype)

    def bw(g, need):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(y, (a,), bw, "sum")


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, need: (g.reshape(old),), "reshape")


def rows(a: Tensor, index) -> Tensor:
    """Select leading-axis entries (a slice or integer index array)."""
    x = a.data
    idx = np.arange(x.shape[0])[index] if isinstance(index, slice) else np.asarray(index, dtype=np.int64)

    def bw(g, need):
        out = np.zeros_like(x)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x[idx], (a,), bw, "rows")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ {tails}")
    bounds = np.cumsum([0] + sizes)

    def bw(g, need):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw, "concat_rows")


def pick(a: Tensor, labels) -> Tensor:
    """``out[i] = a[i, labels[i]]`` for a 2-D ``a``."""
    x = a.data
    lab = np.asarray(labels, dtype=np.int64)
    r = np.arange(x.shape[0])

    def bw(g, need):
        out = np.zeros_like(x)
        out[r, lab] = g
        return (out,)

    return _make(x[r, lab], (a,), bw, "pick")


def norm2(a: Tensor) -> Tensor:
    """Euclidean norm of the whole tensor; subgradient 0 at the origin."""
    x = a.data
    n = np.sqrt(np.sum(x * x))

    def bw(g, need):
        if n == 0:
            return (np.zeros_like(x),)
        return (g * x / n,)

    return _make(np.asarray(n, dtype=x.dtype), (a,), bw, "norm2")


# ---------------------------------------------------------------------------
# linear algebra and broadcasting helpers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, need):
        return (g @ bd.T if need[0] else None, ad.T @ g if need[1] else None)

    return _make(ad @ bd, (a, b), bw, "matmul")


def add_channel(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector ``b[c]`` along axis 1 of ``x[n, c, ...]``."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_channel: {x.shape} vs {b.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _make(x.data + b.data.reshape(view), (x, b),
                 lambda g, need: (g, g.sum(axis=axes) if need[1] else None), "add_channel")


def channel_scale(x: Tensor, a: Tensor) -> Tensor:
    """``x[n, c, h, w] * a[n, c]`` with ``a`` constant over space."""
    if x.ndim != 4 or a.shape != x.shape[:2]:
        raise DimensionError(f"channel_scale: {x.shape} vs {a.shape}")
    xd, ad = x.data, a.data[:, :, None, None]

    def bw(g, need):
        return (g * ad if need[0] else None, (g * xd).sum(axis=(2, 3)) if need[1] else None)

    return _make(xd * ad, (x, a), bw, "channel_scale")


def spatial_scale(x: Tensor, s: Tensor) -> Tensor:
    """``x[n, c, h, w] * s[n, h, w]`` with ``s`` constant over channels."""
    if x.ndim != 4 or s.shape != (x.shape[0],) + x.shape[2:]:
        raise DimensionError(f"spatial_scale: {x.shape} vs {s.shape}")
    xd, sd = x.data, s.data[:, None]

    def bw(g, need):
        return (g * sd if need[0] else None, (g * xd).sum(axis=1) if need[1] else None)

    return _make(xd * sd, (x, s), bw, "spatial_scale")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x[n, i] @ w[i, o] + b[o]``."""
    return add_channel(matmul(x, w), b)


# ---------------------------------------------------------------------------
# convolution and pooling


def _batched(fn):
    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 3:
            y = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(y, y.shape[1:])
        if x.ndim != 4:
            raise DimensionError(f"{fn.__name__}: expected c x h x w or n x c x h x w, got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip), stride 1."""
    n, ci, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[1] != ci:
        raise DimensionError(f"conv2d: kernel {kernel.shape} does not fit input {x.shape}")
    co, _, kh, kw = kernel.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output would be {ho}x{wo}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col as (ci*kh*kw) x (n*ho*wo), filled one kernel tap at a time
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((ci, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    cols = cols.reshape(ci * kh * kw, n * ho * wo)
    kmat = kernel.data.reshape(co, -1)
    out = (kmat @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)

    def bw(g, need):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        dk = (gm @ cols.T).reshape(kernel.shape) if need[1] else None
        dx = None
        if need[0]:
            dcols = (kmat.T @ gm).reshape(ci, kh, kw, n, ho, wo)
            dxp = np.zeros((ci, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            dx = np.ascontiguousarray(dx)
        return (dx, dk)

    return _make(np.ascontiguousarray(out), (x, kernel), bw, "conv2d")


@_batched
def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2 (odd trailing rows/cols are dropped)."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"avg_pool2: input {h}x{w} too small")
    xd = x.data[:, :, :2 * h2, :2 * w2]
    quarter = x.dtype.type(0.25)
    y = (xd[:, :, 0::2, 0::2] + xd[:, :, 0::2, 1::2] + xd[:, :, 1::2, 0::2] + xd[:, :, 1::2, 1::2]) * quarter

    def bw(g, need):
        gx = np.zeros_like(x.data)
        gq = g * quarter
        for a in (0, 1):
            for b in (0, 1):
                gx[:, :, a:2 * h2:2, b:2 * w2:2] = gq
        return (gx,)

    return _make(y.astype(x.dtype), (x,), bw, "avg_pool2")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the two trailing spatial axes."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool: expected 3-D or 4-D, got {x.shape}")
    h, w = x.shape[-2:]
    if h * w < 1:
        raise DimensionError("global_avg_pool: empty spatial extent")
    xd = x.data
    inv = xd.dtype.type(1.0 / (h * w))
    y = xd.sum(axis=(-2, -1)) * inv

    def bw(g, need):
        return (np.broadcast_to(g[..., None, None] * inv, xd.shape).copy(),)

    return _make(np.asarray(y, dtype=xd.dtype), (x,), bw, "global_avg_pool")


@_batched
def channel_pool(x: Tensor) -> Tensor:
    """Two planes per position: mean over channels, then max over channels."""
    n, c, h, w = x.shape
    if c < 1:
        raise DimensionError("channel_pool: no channels")
    xd = x.data
    arg = xd.argmax(axis=1)
    mx = np.take_along_axis(xd, arg[:, None], axis=1)
    mn = xd.mean(axis=1, keepdims=True)
    y = np.concatenate([mn, mx], axis=1).astype(xd.dtype)

    def bw(g, need):
        gx = np.broadcast_to(g[:, :1] * xd.dtype.type(1.0 / c), xd.shape).copy()
        np.put_along_axis(gx, arg[:, None], np.take_along_axis(gx, arg[:, None], axis=1) + g[:, 1:], axis=1)
        return (gx,)

    return _make(y, (x,), bw, "channel_pool")


# ---------------------------------------------------------------------------
# probability helpers (last axis)


def softmax(a: Tensor) -> Tensor:
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g, need):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p.astype(x.dtype), (a,), bw, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g, need):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y.astype(x.dtype), (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class FiniteDiffReport:
    names: List[str]
    errors: Dict[str, np.ndarray]
    analytic: Dict[str, np.ndarray]
    numeric: Dict[str, np.ndarray]
    tol: float

    @property
    def max_error(self) -> float:
        return max((float(e.max()) for e in self.errors.values() if e.size), default=0.0)

    @property
    def fraction_within(self) -> float:
        flat = np.concatenate([e.ravel() for e in self.errors.values()]) if self.errors else np.zeros(0)
        return 1.0 if flat.size == 0 else float(np.mean(flat < self.tol))

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def per_parameter(self) -> Dict[str, float]:
        return {k: float(e.max()) if e.size else 0.0 for k, e in self.errors.items()}


def finite_diff_check(
    f: Callable[[Dict[str, Tensor]], Union[Tensor, Sequence[Tensor]]],
    params: Dict[str, np.ndarray],
    step: float = 1e-3,
    tol: float = 1e-3,
    dtype=np.float64,
) -> Union[FiniteDiffReport, List[FiniteDiffReport]]:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` receives a dict of watched tensors and returns a scalar tensor (or a
    list of them; one report per output is then returned). Both routes run in
    ``dtype`` (64-bit by default). Error per entry is
    ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.
    """
    base = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    tape = Tape()
    watched = {k: tape.watch(v, name=k, dtype=dtype) for k, v in base.items()}
    out = f(watched)
    single = isinstance(out, Tensor)
    outs = [out] if single else list(out)
    analytic = [{k: backward(tape, o)[t].astype(np.float64) for k, t in watched.items()} for o in outs]
    numeric = [{k: np.zeros(v.shape) for k, v in base.items()} for _ in outs]

    def evaluate(values):
        res = f({k: Tensor(v) for k, v in values.items()})
        return [float(r.data) for r in ([res] if isinstance(res, Tensor) else res)]

    for k, v in base.items():
        flat = v.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate(base)
            flat[i] = orig - step
            lo = evaluate(base)
            flat[i] = orig
            for j in range(len(outs)):
                numeric[j][k].reshape(-1)[i] = (hi[j] - lo[j]) / (2 * step)
    reports = []
    for j in range(len(outs)):
        errors = {k: np.abs(analytic[j][k] - numeric[j][k]) / (np.abs(numeric[j][k]) + 1e-8) for k in base}
        reports.append(FiniteDiffReport(list(base), errors, analytic[j], numeric[j], tol))
    return reports[0] if single else reports
