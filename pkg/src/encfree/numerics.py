"""Small dense-tensor library with reverse-mode autodiff.

Arrays are numpy; every op records a closure that maps the output gradient to
input gradients. Two precision modes exist: ``float64`` for gradient checks and
``float32`` for training/benchmarks. Broadcasting is restricted to leading
(batch) dimensions: an operand may be a scalar or have a shape that is a suffix
of the other operand's shape. Anything else must be reshaped explicitly.
"""

from __future__ import annotations

import contextlib
import math
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, NumericError, ShapeError

_DTYPES = {"float64": np.float64, "float32": np.float32}
_state = {"dtype": np.float64, "grad": True, "counter": None, "check_finite": True}


@contextlib.contextmanager
def precision(name: str):
    """Set the dtype used for newly created tensors ("float64" or "float32")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}")
    prev = _state["dtype"]
    _state["dtype"] = _DTYPES[name]
    try:
        yield
    finally:
        _state["dtype"] = prev


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class MacCounter:
    """Multiply-add tally filled in by ``matmul`` while instrumentation is on."""

    def __init__(self):
        self.macs = 0
        self.calls = 0

    def add(self, n: int) -> None:
        self.macs += n
        self.calls += 1


@contextlib.contextmanager
def instrument():
    prev = _state["counter"]
    counter = MacCounter()
    _state["counter"] = counter
    try:
        yield counter
    finally:
        _state["counter"] = prev


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} need an explicit reshape")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


class Tensor:
    """N-d array node in a dynamically built compute graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], grad_fn, op: str) -> "Tensor":
        if _state["check_finite"] and not np.isfinite(data).all():
            raise NumericError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._grad_fn = grad_fn if needs else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` (requiring grad) in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                        "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._make(out, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return Tensor._make(out, (a,), grad_fn, "gelu")


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional shared leading batch dims.

    ``a`` is (..., M, K); ``b`` is (..., K, N) with the same batch dims, or a
    plain (K, N) matrix applied to every batch entry.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    counter = _state["counter"]
    if counter is not None:
        batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
        counter.add(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(out, (a, b), grad_fn, "matmul")


# -- reductions and shape ops -------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    shape = a.shape

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,),
                        lambda g: (np.transpose(g, inv),), "transpose")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; duplicate indices accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise IndexError(f"take: index out of range for axis of length {a.shape[axis]}")
    out = np.take(a.data, idx, axis=axis)
    shape, dtype = a.shape, a.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._make(out, (a,), grad_fn, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, grad_fn, "concat")


def index_add(base: Tensor, rows, values: Tensor) -> Tensor:
    """``base`` with ``values`` added to the given (unique) rows; others untouched."""
    rows = np.asarray(rows, dtype=np.int64)
    if values.shape != (len(rows),) + base.shape[1:]:
        raise ShapeError(f"index_add: values {values.shape} do not match rows {len(rows)}")
    if len(np.unique(rows)) != len(rows):
        raise ShapeError("index_add: rows must be unique")
    out = base.data.copy()
    out[rows] = out[rows] + values.data
    return Tensor._make(out, (base, values), lambda g: (g, g[rows]), "index_add")


def segment_mean(a: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Row ``k`` of the output is the mean of rows of ``a`` whose segment id is ``k``."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ShapeError("segment_mean: one segment id per row required")
    counts = np.bincount(seg, minlength=n_segments).astype(a.data.dtype)
    if (counts == 0).any():
        raise ShapeError("segment_mean: empty segment")
    out = np.zeros((n_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, seg, a.data)
    scale = (1.0 / counts).reshape((-1,) + (1,) * (a.ndim - 1))
    out *= scale

    def grad_fn(g):
        return ((g * scale)[seg],)

    return Tensor._make(out, (a,), grad_fn, "segment_mean")


# -- normalisation / probability ---------------------------------------------
def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) broadcasts over leading dims."""
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _broadcast_shape(x.shape, mask.shape, "softmax mask")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericError("softmax row with every entry masked")
    out = np.subtract(x, m, out=x if mask is not None else None)  # masked copy is ours to reuse
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (a,), grad_fn, "softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data
    d = x.shape[-1]

    def grad_fn(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gbias = flat_g.sum(axis=0)
        return gx, ggain, gbias

    return Tensor._make(out, (a, gain, bias), grad_fn, "layer_norm")


def l2_normalize(a: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        bad = np.argwhere(norm[..., 0] == 0)
        raise NumericError(f"zero-norm vector at position {tuple(int(v) for v in bad[0])}")
    out = x / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return Tensor._make(out, (a,), grad_fn, "l2_normalize")


def softmax_ce(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_ce expects N x V logits, got {logits.shape}")
    n, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise ShapeError(f"softmax_ce: {len(tgt)} targets for {n} rows")
    if n == 0:
        raise ShapeError("softmax_ce over zero rows")
    if (tgt < 0).any() or (tgt >= v).any():
        raise IndexError(f"softmax_ce: target index outside [0, {v})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (x - m) - np.log(s)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, tgt].mean(), dtype=x.dtype)
    probs = e / s

    def grad_fn(g):
        d = probs.copy()
        d[rows, tgt] -= 1.0
        return (d * (g / n),)

    return Tensor._make(loss, (logits,), grad_fn, "softmax_ce")


# -- gradient checking --------------------------------------------------------
def _rel_err(analytic: float, numeric: float, strict: bool = False) -> float:
    if strict:
        # symmetric relative error; the floor keeps round-off on ~0 entries from dominating
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6, strict: bool = False) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    return grad_check_params(lambda: f(x), {"x": x}, h=h, strict=strict)


def grad_check_params(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-6,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    report: dict | None = None,
    strict: bool = False,
) -> float:
    """Finite-difference check of ``f()`` against every (or a sample of) parameter entries.

    ``f`` must rebuild the graph from the current parameter values on each call.
    ``strict`` swaps the max(1, |analytic|) denominator for a symmetric one.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise NumericError(f"grad check needs float64 parameters ({name} is {p.data.dtype})")
        p.requires_grad = True
        p.grad = None
    out = f()
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if coords_per_param is None or coords_per_param >= flat.size:
                coords = range(flat.size)
            else:
                coords = rng.choice(flat.size, size=coords_per_param, replace=False)
            err_p = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                if not math.isfinite(numeric):
                    raise NumericError(f"non-finite finite difference at {name}[{i}]")
                err_p = max(err_p, _rel_err(float(analytic[name].reshape(-1)[i]), numeric, strict))
            if report is not None:
                report[name] = err_p
            worst = max(worst, err_p)
    return worst


# -- binary tensor format -----------------------------------------------------
ELVT_MAGIC = b"ELVT"
ELVT_VERSION = 1


def encode_elvt(array) -> bytes:
    arr = np.array(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    if any(s <= 0 for s in arr.shape):
        raise FormatError(f"ELVT extents must be positive, got {arr.shape}")
    header = ELVT_MAGIC + struct.pack("<HH", ELVT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_elvt(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != ELVT_MAGIC:
        raise FormatError("not an ELVT tensor (bad magic)")
    version, rank = struct.unpack_from("<HH", blob, 4)
    if version != ELVT_VERSION:
        raise FormatError(f"unsupported ELVT version {version}")
    head = 8 + 4 * rank
    if len(blob) < head:
        raise FormatError("truncated ELVT header")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != head + 4 * count:
        raise FormatError(f"ELVT payload is {len(blob) - head} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(shape).astype(np.float32)


def save_elvt(path, array) -> None:
    Path(path).write_bytes(encode_elvt(array))


def load_elvt(path) -> np.ndarray:
    return decode_elvt(Path(path).read_bytes())
