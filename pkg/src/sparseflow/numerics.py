"""Dense tensors with tape-based reverse-mode differentiation.

Small define-by-run engine on top of numpy arrays: every differentiable
primitive records a backward closure on the active ``GradTape``; replaying
the tape in reverse yields gradients that are checked against central
finite differences in the test suite. 64-bit precision is the default so
gradient checks have headroom; 32-bit data is accepted for storage.

Shapes are explicit and row-major. Broadcasting is intentionally limited
to scalars and trailing-axis vectors (bias addition); everything else
must match exactly.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, LengthError, ShapeError, StateError

Array = np.ndarray

_STATE = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_STATE, "tape", None)


class Tensor:
    """A dense real-valued array plus autograd metadata."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the module-level primitives.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    """A trainable tensor (leaf that accumulates gradients)."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of primitive ops for reverse traversal.

    Use as a context manager; ops executed inside record themselves when
    their output requires grad. ``backward`` walks the record once, in
    reverse execution order (a valid reverse topological order for a
    define-by-run graph). A tape is single-threaded; independent tapes on
    independent threads do not share state.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise StateError("GradTape contexts do not nest")
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tape = None

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._entries.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of requires-grad tensors."""
        if loss.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
        if loss.requires_grad and id(loss) in grads:
            g = grads.pop(id(loss))
            loss.grad = g if loss.grad is None else loss.grad + g
        for out, inputs, _ in self._entries:
            for t in inputs:
                if t.requires_grad and id(t) in grads:
                    g = grads.pop(id(t))
                    t.grad = g if t.grad is None else t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _finite(arr: Array) -> bool:
    return bool(np.isfinite(arr).all())


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if not (ad.shape == bd.shape or ad.size == 1 or bd.size == 1
            or (bd.ndim == 1 and ad.ndim >= 1 and ad.shape[-1] == bd.shape[0])
            or (ad.ndim == 1 and bd.ndim >= 1 and bd.shape[-1] == ad.shape[0])):
        raise ShapeError(f"add: incompatible shapes {ad.shape} and {bd.shape}")
    out = Tensor(ad + bd, a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:

        def backward(g):
            return _reduce_to(g, ad.shape), _reduce_to(g, bd.shape)

        tape._record(out, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if not (ad.shape == bd.shape or ad.size == 1 or bd.size == 1
            or (bd.ndim == 1 and ad.ndim >= 1 and ad.shape[-1] == bd.shape[0])
            or (ad.ndim == 1 and bd.ndim >= 1 and bd.shape[-1] == ad.shape[0])):
        raise ShapeError(f"mul: incompatible shapes {ad.shape} and {bd.shape}")
    out = Tensor(ad * bd, a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:

        def backward(g):
            ga = _reduce_to(g * bd, ad.shape) if a.requires_grad or _on_tape(a) else None
            gb = _reduce_to(g * ad, bd.shape) if b.requires_grad or _on_tape(b) else None
            return ga, gb

        tape._record(out, (a, b), backward)
    return out


def _on_tape(t: Tensor) -> bool:
    # Intermediates produced under a tape carry requires_grad; constants don't.
    return t.requires_grad


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to the shape of a (limited-)broadcast operand."""
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    # trailing-axis vector case
    return g.reshape(-1, shape[-1]).sum(axis=0)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.exp(x.data), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        od = out.data
        tape._record(out, (x,), lambda g: (g * od,))
    return out


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where the clamp binds."""
    x = _as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        inside = (x.data > lo) & (x.data < hi)
        tape._record(out, (x,), lambda g: (g * inside,))
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig, x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        xd = x.data
        tape._record(out, (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.array(x.data.sum()), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        shape = x.data.shape
        tape._record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    return mul(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product, optionally batched over identical leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul expects >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = Tensor(ad @ bd, a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:

        def backward(g):
            ga = g @ np.swapaxes(bd, -1, -2) if _on_tape(a) else None
            gb = np.swapaxes(ad, -1, -2) @ g if _on_tape(b) else None
            return ga, gb

        tape._record(out, (a, b), backward)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Overflow-safe softmax along ``axis`` (max-subtraction)."""
    x = _as_tensor(x)
    if not _finite(x.data):
        raise DomainError("softmax requires finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:

        def backward(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            return (s * (g - dot),)

        tape._record(out, (x,), backward)
    return out


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """Scale each trailing vector to (gain-weighted) unit root-mean-square."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if x.data.shape[-1] != gain.data.shape[-1] or gain.data.ndim != 1:
        raise ShapeError(f"rmsnorm: gain shape {gain.data.shape} does not match last axis of {x.data.shape}")
    xd, gd = x.data, gain.data
    n = xd.shape[-1]
    ms = (xd * xd).mean(axis=-1, keepdims=True) + eps
    inv = ms ** -0.5
    normed = xd * inv
    out = Tensor(normed * gd, x.requires_grad or gain.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:

        def backward(g):
            gx = None
            if _on_tape(x):
                gy = g * gd
                # d/dx of x * (mean(x^2)+eps)^-1/2
                dot = (gy * xd).sum(axis=-1, keepdims=True)
                gx = inv * gy - (inv ** 3 / n) * xd * dot
            gg = (g * normed).reshape(-1, n).sum(axis=0) if _on_tape(gain) else None
            return gx, gg

        tape._record(out, (x, gain), backward)
    return out


def conv1d(x, kernels, stride: int = 1, padding: str = "valid") -> Tensor:
    """1-D convolution over frames.

    x: (frames, c_in); kernels: (width, c_in, c_out). ``valid`` yields
    floor((frames - width)/stride) + 1 output frames; ``same`` pads so the
    output covers ceil(frames/stride) frames.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    xd, kd = x.data, kernels.data
    if xd.ndim != 2 or kd.ndim != 3 or xd.shape[1] != kd.shape[1]:
        raise ShapeError(f"conv1d: x {xd.shape} vs kernels {kd.shape}")
    if stride < 1 or kd.shape[0] < 1:
        raise DomainError("conv1d requires stride >= 1 and kernel width >= 1")
    width = kd.shape[0]
    frames = xd.shape[0]
    if padding == "valid":
        pad_left = pad_right = 0
        out_frames = (frames - width) // stride + 1
    elif padding == "same":
        out_frames = -(-frames // stride)
        total = max((out_frames - 1) * stride + width - frames, 0)
        pad_left = total // 2
        pad_right = total - pad_left
    else:
        raise DomainError(f"unknown padding {padding!r}")
    if out_frames < 1:
        raise LengthError(f"conv1d: {frames} frames with width {width} stride {stride} gives empty output")
    xp = np.pad(xd, ((pad_left, pad_right), (0, 0))) if (pad_left or pad_right) else xd
    out_data = np.zeros((out_frames, kd.shape[2]), dtype=xd.dtype)
    for w in range(width):
        out_data += xp[w: w + stride * out_frames: stride] @ kd[w]
    out = Tensor(out_data, x.requires_grad or kernels.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:

        def backward(g):
            gx = gk = None
            if _on_tape(x):
                gxp = np.zeros_like(xp)
                for w in range(width):
                    gxp[w: w + stride * out_frames: stride] += g @ kd[w].T
                gx = gxp[pad_left: pad_left + frames]
            if _on_tape(kernels):
                gk = np.empty_like(kd)
                for w in range(width):
                    gk[w] = xp[w: w + stride * out_frames: stride].T @ g
            return gx, gk

        tape._record(out, (x, kernels), backward)
    return out


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        orig = x.data.shape
        tape._record(out, (x,), lambda g: (g.reshape(orig),))
    return out


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.transpose(axes), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        inv = np.argsort(axes)
        tape._record(out, (x,), lambda g: (g.transpose(inv),))
    return out


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 any(p.requires_grad for p in parts))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        tape._record(out, tuple(parts), backward)
    return out


def slice_last(x, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""
    x = _as_tensor(x)
    out = Tensor(x.data[..., start:stop].copy(), x.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        shape = x.data.shape

        def backward(g):
            gx = np.zeros(shape, dtype=g.dtype)
            gx[..., start:stop] = g
            return (gx,)

        tape._record(out, (x,), backward)
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup: table (rows, dim), ids int array -> (len(ids), dim)."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise DomainError("embedding id out of range")
    out = Tensor(table.data[idx], table.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        shape = table.data.shape

        def backward(g):
            gt = np.zeros(shape, dtype=g.dtype)
            np.add.at(gt, idx, g)
            return (gt,)

        tape._record(out, (table,), backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    def __init__(self, max_rel_err: float, per_param: list[float], tol: float):
        self.max_rel_err = max_rel_err
        self.per_param = per_param
        self.tol = tol

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def __repr__(self) -> str:
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, ok={self.ok})"


def grad_check(f: Callable[[list[Tensor]], Tensor], params: list[Tensor],
               h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(params)`` to central differences.

    Relative error per entry is |ad - fd| / max(1, |ad|, |fd|), so small
    gradients are compared absolutely (central differences carry O(eps/h)
    noise that would dominate a pure ratio).
    """
    for p in params:
        if not p.requires_grad:
            raise DomainError("grad_check params must require grad")
    zero_grads(params)
    with GradTape() as tape:
        out = f(params)
        if not _finite(out.data):
            raise DomainError("grad_check: f is not finite at the given point")
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    per_param = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(params).item()
            flat[i] = orig - h
            lo = f(params).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise DomainError("grad_check: f is not finite near the given point")
            fd[i] = (hi - lo) / (2.0 * h)
        fd = fd.reshape(p.data.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
        per_param.append(float(np.max(np.abs(a - fd) / denom)) if a.size else 0.0)
    max_err = max(per_param) if per_param else 0.0
    return GradCheckReport(max_err, per_param, tol)


# ---------------------------------------------------------------------------
# tensor file format
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_array(path, arr: Array, name: str = "", dtype: str = "f32") -> None:
    """Write raw little-endian values plus a JSON sidecar describing them.

    ``path`` is the payload file; the sidecar lives at ``path + '.json'``.
    Round-trip through ``load_array`` is bit-exact for the stored dtype.
    """
    if dtype not in _DTYPES:
        raise DomainError(f"unsupported dtype {dtype!r}")
    path = Path(path)
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
    path.write_bytes(data.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": dtype, "name": name}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_array(path) -> Array:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    dtype = _DTYPES[sidecar["dtype"]]
    data = np.frombuffer(path.read_bytes(), dtype=dtype)
    return data.reshape(sidecar["shape"]).copy()


def save_checkpoint(dirpath, params: dict, config: dict, dtype: str = "f32") -> None:
    """Directory of tensor files (one per parameter) plus a JSON config."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for name in names:
        p = params[name]
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        save_array(dirpath / f"{name}.bin", arr, name=name, dtype=dtype)
    meta = {"params": names, "config": config}
    (dirpath / "config.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_checkpoint(dirpath) -> tuple[dict, dict]:
    """Returns ({name: float64 parameter Tensor}, config)."""
    dirpath = Path(dirpath)
    meta = json.loads((dirpath / "config.json").read_text())
    params = {}
    for name in meta["params"]:
        params[name] = parameter(load_array(dirpath / f"{name}.bin").astype(np.float64))
    return params, meta["config"]
