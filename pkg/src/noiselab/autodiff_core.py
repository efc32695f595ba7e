"""Minimal dense-tensor engine with reverse-mode differentiation.

Design: a thread-local tape records one node per op in creation order,
which is already a topological order, so backward is a single reverse
sweep visiting each node exactly once. Forward values keep their input
dtype (float32 by default for networks); gradients are always
accumulated in float64. Every forward output and every backward
gradient is checked for NaN/Inf and trips a GradientFault naming the
offending node.

The op set is deliberately small: what the defense networks and losses
need, nothing more. conv2d supports stride 1 only; strided and dilated
variants are out of scope.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, GradientFault, IoFormatError, ShapeError

FAULT_CHECKS = True

_TLS = threading.local()


def _tape_stack() -> list:
    if not hasattr(_TLS, "stack"):
        _TLS.stack = []
    return _TLS.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-d value (up to 4 axes) with optional gradient-tape participation."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim > 4:
            raise ShapeError(f"tensors support at most 4 axes, got {arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)


@dataclass
class _Node:
    op: str
    inputs: tuple
    in_ids: tuple
    out_id: int
    backward: object  # callable(gout: f64 ndarray) -> tuple of grads aligned with inputs


class Tape:
    """Single-writer computation record; reusable as a context manager.

    Node ids are scoped to the tape through a token so tensors (network
    parameters in particular) can flow through many tapes in sequence
    without stale ids leaking between steps.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._next_id = 0
        self._token = object()
        self._watched: list[Tensor] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _id_of(self, t: Tensor) -> int | None:
        tid = t.tape_id
        if tid is not None and tid[0] is self._token:
            return tid[1]
        return None

    def _assign_id(self, t: Tensor) -> int:
        idx = self._id_of(t)
        if idx is None:
            idx = self._next_id
            self._next_id += 1
            t.tape_id = (self._token, idx)
        return idx

    def watch(self, t: Tensor):
        """Register a leaf so backward always populates its grad."""
        if not t.requires_grad:
            raise ContractError("watch() needs requires_grad=True")
        if self._id_of(t) is None:
            self._assign_id(t)
            self._watched.append(t)

    def record(self, op: str, inputs: tuple, out: Tensor, backward) -> None:
        for inp in inputs:
            if isinstance(inp, Tensor) and inp.requires_grad and self._id_of(inp) is None:
                self.watch(inp)
        in_ids = tuple(
            self._id_of(inp) if isinstance(inp, Tensor) else None for inp in inputs
        )
        if all(i is None for i in in_ids):
            return  # nothing on the tape feeds this op
        out_id = self._assign_id(out)
        self.nodes.append(_Node(op, inputs, in_ids, out_id, backward))

    def backward(self, loss: Tensor) -> None:
        """Reverse-sweep gradient accumulation in float64."""
        if loss.data.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss_id = self._id_of(loss)
        if loss_id is None:
            raise ContractError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {loss_id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            gout = grads.pop(node.out_id, None)
            if gout is None:
                continue
            # 0-d accumulations collapse to numpy scalars; ops expect arrays.
            gins = node.backward(np.asarray(gout))
            for in_id, gin in zip(node.in_ids, gins):
                if gin is None or in_id is None:
                    continue
                if FAULT_CHECKS and not np.isfinite(gin).all():
                    raise GradientFault(f"non-finite gradient out of node '{node.op}' (id {node.out_id})")
                gin = gin.astype(np.float64, copy=False)
                acc = grads.get(in_id)
                grads[in_id] = gin if acc is None else acc + gin
        for leaf in self._watched:
            g = grads.get(self._id_of(leaf))
            leaf.grad = np.zeros(leaf.data.shape, dtype=np.float64) if g is None else g


def tape() -> Tape:
    return Tape()


class suspend_tape:
    """Context manager that hides any active tape (no-grad region)."""

    def __enter__(self):
        _tape_stack().append(None)
        return None

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def backward(loss: Tensor, t: Tape | None = None) -> None:
    t = t if t is not None else active_tape()
    if t is None:
        raise ContractError("no active tape")
    t.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), requires_grad=False)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FAULT_CHECKS and not np.isfinite(arr).all():
        raise GradientFault(f"non-finite value out of op '{op}'")


def _emit(op: str, inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data, dtype=out_data.dtype)
    t = active_tape()
    if t is not None:
        t.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _emit("div", (a, b), out, bwd)


def concat_channels(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    base = parts[0].data.shape
    for p in parts:
        if p.data.ndim != 4 or p.data.shape[0] != base[0] or p.data.shape[2:] != base[2:]:
            raise ShapeError("concat needs matching batch and spatial dims")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def bwd(g):
        grads, at = [], 0
        for size in sizes:
            grads.append(g[:, at:at + size])
            at += size
        return tuple(grads)

    return _emit("concat_channels", tuple(parts), out, bwd)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim < 2 or not (0 <= lo < hi <= x.data.shape[1]):
        raise ShapeError(f"bad channel slice [{lo}:{hi}] for shape {x.data.shape}")
    out = x.data[:, lo:hi].copy()
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[:, lo:hi] = g
        return (gx,)

    return _emit("slice_channels", (x,), out, bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _emit("reshape", (x,), out.copy(), bwd)


# ---------------------------------------------------------------- activations

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    neg = xd < 0  # derivative at exactly 0 is 1
    out = xd.copy()
    np.multiply(out, xd.dtype.type(slope), where=neg, out=out)

    def bwd(g):
        gg = g.copy()
        np.multiply(gg, slope, where=neg, out=gg)
        return (gg,)

    return _emit("leaky_relu", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, slope=0.0)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, bwd)


def softmax(x: Tensor) -> Tensor:
    """Shift-stabilized softmax along the last axis."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _emit("softmax", (x,), out.astype(xd.dtype), bwd)


# ---------------------------------------------------------------- pool/shape

def avg_pool(x: Tensor, k: int) -> Tensor:
    b, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by pool size {k}")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bwd(g):
        g = g / (k * k)
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3),)

    return _emit("avg_pool", (x,), out.astype(x.data.dtype), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    b, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / (h * w), (b, c, h, w)).copy(),)

    return _emit("global_avg_pool", (x,), out.astype(x.data.dtype), bwd)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    b, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit("upsample_nearest", (x,), out, bwd)


# ---------------------------------------------------------------- linear maps

def _im2col(xd: np.ndarray, kh: int, kw: int, padding: int) -> tuple[np.ndarray, int, int]:
    """(B,C,H,W) -> (B, kh*kw*C, OH*OW) columns for stride 1.

    Built by kh*kw plain slice copies (contiguous runs) rather than a
    windowed-view gather, which is the difference between memcpy speed
    and a cache-miss per element on 64x64 feature maps.
    """
    b, c, h, w = xd.shape
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    buf = np.empty((b, kh * kw, c, oh, ow), dtype=xd.dtype)
    for di in range(kh):
        for dj in range(kw):
            buf[:, di * kw + dj] = xp[:, :, di:di + oh, dj:dj + ow]
    return buf.reshape(b, kh * kw * c, oh * ow), oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation with bias. Stride 1 only (by design)."""
    if stride != 1:
        raise ContractError("conv2d supports stride 1 only")
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    bsz, cin, h, w = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise ShapeError(f"channel mismatch: input {cin}, weight {cin_w}")
    if bd.shape != (cout,):
        raise ShapeError(f"bias must be ({cout},), got {bd.shape}")
    if h + 2 * padding - kh + 1 <= 0 or w + 2 * padding - kw + 1 <= 0:
        raise ShapeError("kernel larger than padded input")
    cols, oh, ow = _im2col(xd, kh, kw, padding)
    # Weight rows reordered to the (di, dj, c) column layout of the buffer.
    wr = wd.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = np.matmul(wr[None], cols)
    out += bd[:, None]
    out = out.reshape(bsz, cout, oh, ow)
    # Constant inputs (images) never receive gradient, so the input-side
    # GEMM and scatter can be skipped entirely for them.
    t = active_tape()
    need_gx = x.requires_grad or (t is not None and t._id_of(x) is not None)

    def bwd(g):
        # GEMMs run in the forward dtype (f32 for training speed, f64 under
        # grad_check clones); the tape still accumulates leaf grads in f64.
        gd = g.astype(xd.dtype, copy=False)
        g3 = np.ascontiguousarray(gd.reshape(bsz, cout, oh * ow))
        gb = g.sum(axis=(0, 2, 3))
        gw_r = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
        gw = gw_r.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if not need_gx:
            return None, gw, gb
        gcols = np.matmul(wr.T[None], g3).reshape(bsz, kh, kw, cin, oh, ow)
        hp, wp = h + 2 * padding, w + 2 * padding
        gxp = np.zeros((bsz, cin, hp, wp), dtype=gd.dtype)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, :, di:di + oh, dj:dj + ow] += gcols[:, di, dj]
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    return _emit("conv2d", (x, weight, bias), out, bwd)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias for (B, Din) inputs."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"affine shapes {xd.shape} x {wd.shape} do not chain")
    if bd.shape != (wd.shape[0],):
        raise ShapeError(f"bias must be ({wd.shape[0]},), got {bd.shape}")
    out = xd @ wd.T + bd

    def bwd(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit("affine", (x, weight, bias), out, bwd)


# ---------------------------------------------------------------- reductions

def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    shape = x.data.shape

    def bwd(g):
        return (np.full(shape, float(g), dtype=np.float64),)

    return _emit("reduce_sum", (x,), out, bwd)


def reduce_mean(x: Tensor) -> Tensor:
    size = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype)
    shape = x.data.shape

    def bwd(g):
        return (np.full(shape, float(g) / size, dtype=np.float64),)

    return _emit("reduce_mean", (x,), out, bwd)


def reduce_l1(x: Tensor) -> Tensor:
    xd = x.data
    out = np.asarray(np.abs(xd, dtype=np.float64).sum(), dtype=xd.dtype)

    def bwd(g):
        return (float(g) * np.sign(xd),)  # subgradient 0 at 0

    return _emit("reduce_l1", (x,), out, bwd)


def reduce_l2(x: Tensor) -> Tensor:
    xd = x.data.astype(np.float64, copy=False)
    val = float(np.sqrt((xd * xd).sum()))
    out = np.asarray(val, dtype=x.data.dtype)

    def bwd(g):
        if val == 0.0:
            return (np.zeros_like(xd),)
        return (float(g) * xd / val,)

    return _emit("reduce_l2", (x,), out, bwd)


def mean_abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference, the workhorse feature/pixel distance."""
    d = sub(a, b)
    n = reduce_l1(d)
    return mul(n, 1.0 / d.data.size)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    passed: bool
    max_abs_err: float
    max_rel_err: float
    detail: str = ""


def grad_check(
    f,
    inputs: list[Tensor],
    tol_rel: float = 1e-4,
    tol_abs: float = 1e-6,
    step: float = 1e-3,
    probe_threshold: int = 10_000,
    n_probes: int = 8,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar f(*inputs) to central differences.

    Inputs are cloned to float64. Exhaustive per-coordinate check below
    probe_threshold total coordinates, random probe directions above.
    """
    clones = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    with tape() as tp:
        for c in clones:
            tp.watch(c)
        loss = f(*clones)
    tp.backward(loss)
    analytic = [c.grad.copy() for c in clones]

    def eval_at(vals):
        frozen = [Tensor(v, requires_grad=False) for v in vals]
        return float(f(*frozen).data)

    base = [c.data.copy() for c in clones]
    total = sum(v.size for v in base)
    worst_abs = 0.0
    worst_rel = 0.0
    passed = True
    detail = ""

    def judge(a, n):
        nonlocal worst_abs, worst_rel, passed, detail
        err = abs(a - n)
        scale = max(abs(a), abs(n))
        worst_abs = max(worst_abs, err)
        if scale > 0:
            worst_rel = max(worst_rel, err / scale)
        if err > max(tol_abs, tol_rel * scale):
            passed = False
            if not detail:
                detail = f"analytic {a:.8g} vs numeric {n:.8g}"

    if total <= probe_threshold:
        for idx, vals in enumerate(base):
            flat = vals.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = eval_at(base)
                flat[j] = orig - step
                fm = eval_at(base)
                flat[j] = orig
                judge(analytic[idx].reshape(-1)[j], (fp - fm) / (2 * step))
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        for _ in range(n_probes):
            dirs = [rng.standard_normal(v.shape) for v in base]
            norm = np.sqrt(sum((d * d).sum() for d in dirs))
            dirs = [d / norm for d in dirs]
            fp = eval_at([v + step * d for v, d in zip(base, dirs)])
            fm = eval_at([v - step * d for v, d in zip(base, dirs)])
            a = sum((g * d).sum() for g, d in zip(analytic, dirs))
            judge(float(a), (fp - fm) / (2 * step))

    return GradCheckReport(passed=passed, max_abs_err=worst_abs, max_rel_err=worst_rel, detail=detail)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"ADT1"
_MAX_ELEMENTS = 2 ** 31


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors to the flat binary format plus a JSON name index."""
    names = list(tensors.keys())
    blobs = []
    for name in names:
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if arr.size >= _MAX_ELEMENTS:
            raise IoFormatError(f"tensor '{name}' too large for format")
        blobs.append(arr)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blobs)))
        for arr in blobs:
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    index = {"tensors": names, "meta": meta or {}}
    with open(str(path) + ".json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=False)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; bit-exact round trip of save_checkpoint."""
    try:
        with open(str(path) + ".json") as fh:
            index = json.load(fh)
        names = index["tensors"]
        meta = index.get("meta", {})
    except (OSError, ValueError, KeyError) as exc:
        raise IoFormatError(f"bad checkpoint index: {exc}") from exc
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise IoFormatError("bad magic, not a checkpoint file")
    (count,) = struct.unpack_from("<I", blob, 4)
    if count != len(names):
        raise IoFormatError(f"index names {len(names)} tensors, file has {count}")
    offset = 8
    out: dict[str, np.ndarray] = {}
    for name in names:
        try:
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if n >= _MAX_ELEMENTS:
                raise IoFormatError(f"tensor '{name}' extent overflow")
            end = offset + 4 * n
            if end > len(blob):
                raise IoFormatError("truncated checkpoint payload")
            arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
            offset = end
        except struct.error as exc:
            raise IoFormatError(f"truncated checkpoint header: {exc}") from exc
        out[name] = arr
    if offset != len(blob):
        raise IoFormatError("trailing bytes after last tensor")
    return out, meta
