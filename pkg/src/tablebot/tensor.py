"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

The op set is deliberately small: matmul is the only contraction primitive,
attention and every network in this package are built from it plus the
elementwise/shape ops below. All buffers are row-major float32.
"""

from __future__ import annotations

import enum
from typing import Callable, Sequence

import numpy as np

from . import _kernels as _K

# Debug switch: verify every op output is finite (slows kernels, off by default).
_CHECK_FINITE = False
# Determinism switch. The numpy kernels used here are deterministic regardless;
# the flag is the public contract and would gate any parallel kernel added later.
_DETERMINISTIC = True
# Working dtype. float32 everywhere; grad_check's finite-difference replay
# temporarily switches to float64 so the oracle outresolves the system under test.
_DTYPE = np.float32


class precision:
    """Context manager: run enclosed tensor ops at the given float dtype."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        global _DTYPE
        self._prev = _DTYPE
        _DTYPE = self.dtype
        return self

    def __exit__(self, *exc):
        global _DTYPE
        _DTYPE = self._prev


def set_debug_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def set_deterministic(enabled: bool) -> None:
    global _DETERMINISTIC
    _DETERMINISTIC = bool(enabled)


def deterministic() -> bool:
    return _DETERMINISTIC


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Op(enum.Enum):
    MATMUL = "matmul"
    ADD = "add"
    MULTIPLY = "multiply"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    CONCAT = "concat"
    SLICE = "slice"
    EMBEDDING_LOOKUP = "embedding_lookup"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    GELU = "gelu"
    MEAN = "mean"
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


class Tensor:
    """Dense n-d float32 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        # intermediates may be strided views (transpose); the row-major flat
        # buffer contract applies at creation and serialization boundaries
        arr = np.asarray(data, dtype=_DTYPE)
        if requires_grad and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    # Operator sugar; everything routes through apply().
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return multiply(_as_tensor(other), self)

    def __neg__(self):
        return multiply(self, Tensor(np.float32(-1.0)))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of ops; inputs always precede outputs (topological)."""

    def __init__(self):
        self.entries: list[tuple[str, tuple[int, ...], int, Callable]] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None

    def _node_of(self, t: Tensor) -> int:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        nid = self._next_id
        self._next_id += 1
        t._tape = self
        t.node_id = nid
        self._leaves[nid] = t
        return nid


_ACTIVE_TAPE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse-sweep the tape of `loss`; returns grads for every recorded
    requires_grad leaf (zeros for leaves off the path to `loss`).

    Consumes the tape: entries and saved activations are released afterwards,
    which breaks the tensor<->tape reference cycles that would otherwise pin
    hundreds of megabytes until the cycle collector runs.
    """
    if loss._tape is None:
        raise TapeError("backward: loss tensor is detached from any tape")
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    entries = tape.entries
    for i in range(len(entries) - 1, -1, -1):
        _op_name, _in_ids, out_id, bwd = entries[i]
        entries[i] = None  # free saved activations as soon as they are consumed
        g = grads.pop(out_id, None)
        if g is None:
            continue
        bwd(g, grads)
    out: dict[Tensor, Tensor] = {}
    for nid, leaf in tape._leaves.items():
        if leaf.requires_grad:
            g = grads.get(nid)
            out[leaf] = Tensor(g if g is not None else np.zeros_like(leaf.data))
    tape.entries.clear()
    tape._leaves.clear()
    return out


def _acc(grads: dict[int, np.ndarray], nid: int, g: np.ndarray) -> None:
    prev = grads.get(nid)
    grads[nid] = g if prev is None else prev + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    a = axis + ndim if axis < 0 else axis
    if not 0 <= a < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return a


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: needs ndim>=2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    a_req, b_req = a.requires_grad, b.requires_grad
    a_shape, b_shape = ad.shape, bd.shape

    def bwd(g, grads):
        if a_req:
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            _acc(grads, bwd.in_ids[0], _unbroadcast(ga, a_shape))
        if b_req:
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            _acc(grads, bwd.in_ids[1], _unbroadcast(gb, b_shape))

    return _record(Op.MATMUL, (a, b), out, bwd)


def _record(op: Op, inputs: tuple[Tensor, ...], out_data: np.ndarray, bwd) -> Tensor:
    # Late-bind input node ids onto the closure once the tape assigns them.
    if _CHECK_FINITE and not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op.value}: non-finite values in output")
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _ACTIVE_TAPE
    if tape is not None and out.requires_grad:
        in_ids = tuple(tape._node_of(t) for t in inputs)
        bwd.in_ids = in_ids
        out_id = tape._next_id
        tape._next_id += 1
        out._tape = tape
        out.node_id = out_id
        tape.entries.append((op.value, in_ids, out_id, bwd))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes not broadcastable, {a.shape} + {b.shape}") from None
    a_req, b_req = a.requires_grad, b.requires_grad
    a_shape, b_shape = a.shape, b.shape

    def bwd(g, grads):
        if a_req:
            _acc(grads, bwd.in_ids[0], _unbroadcast(g, a_shape))
        if b_req:
            _acc(grads, bwd.in_ids[1], _unbroadcast(g, b_shape))

    return _record(Op.ADD, (a, b), out, bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: shapes not broadcastable, {a.shape} * {b.shape}") from None
    a_req, b_req = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def bwd(g, grads):
        if a_req:
            _acc(grads, bwd.in_ids[0], _unbroadcast(g * bd, ad.shape))
        if b_req:
            _acc(grads, bwd.in_ids[1], _unbroadcast(g * ad, bd.shape))

    return _record(Op.MULTIPLY, (a, b), out, bwd)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for ndim {x.ndim}")
    # strided view: BLAS and ufuncs consume it directly, copying costs DRAM
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))
    req = x.requires_grad

    def bwd(g, grads):
        if req:
            _acc(grads, bwd.in_ids[0], g.transpose(inv))

    return _record(Op.TRANSPOSE, (x,), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    old = x.shape
    req = x.requires_grad

    def bwd(g, grads):
        if req:
            _acc(grads, bwd.in_ids[0], g.reshape(old))

    return _record(Op.RESHAPE, (x,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    ax = _norm_axis(axis, nd, "concat")
    for t in tensors[1:]:
        if t.ndim != nd or any(
            i != ax and t.shape[i] != tensors[0].shape[i] for i in range(nd)
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[tuple(t.shape) for t in tensors]} on axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    reqs = [t.requires_grad for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, grads):
        parts = np.split(g, splits, axis=ax)
        for i, part in enumerate(parts):
            if reqs[i]:
                _acc(grads, bwd.in_ids[i], np.ascontiguousarray(part))

    return _record(Op.CONCAT, tuple(tensors), out, bwd)


def slice_(x: Tensor, begin: Sequence[int], size: Sequence[int]) -> Tensor:
    begin = tuple(int(b) for b in begin)
    size = tuple(int(s) for s in size)
    if len(begin) != x.ndim or len(size) != x.ndim:
        raise ShapeError(f"slice: begin/size rank must match ndim {x.ndim}")
    for b, s, d in zip(begin, size, x.shape):
        if b < 0 or s < 0 or b + s > d:
            raise ShapeError(f"slice: window begin={begin} size={size} exceeds shape {x.shape}")
    idx = tuple(slice(b, b + s) for b, s in zip(begin, size))
    out = np.ascontiguousarray(x.data[idx])
    shape = x.shape
    req = x.requires_grad

    def bwd(g, grads):
        if req:
            full = np.zeros(shape, dtype=np.float32)
            full[idx] = g
            _acc(grads, bwd.in_ids[0], full)

    return _record(Op.SLICE, (x,), out, bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-d `table` by integer `ids` (any shape)."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}), "
            f"got min={ids.min()} max={ids.max()}"
        )
    out = table.data[ids]
    req = table.requires_grad
    tshape = table.shape
    flat_ids = ids.reshape(-1)

    def bwd(g, grads):
        if req:
            gt = np.zeros(tshape, dtype=np.float32)
            np.add.at(gt, flat_ids, g.reshape(-1, tshape[1]))
            _acc(grads, bwd.in_ids[0], gt)

    return _record(Op.EMBEDDING_LOOKUP, (table,), out, bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    # numpy forward (SIMD exp); fused numba backward when available
    ax = _norm_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted, out=shifted)
    out = e / e.sum(axis=ax, keepdims=True)
    req = x.requires_grad

    if _K.HAVE_NUMBA and ax == x.ndim - 1 and out.dtype == np.float32:
        shape = out.shape

        def bwd(g, grads):
            if req:
                gx = _K.softmax_bwd(
                    np.ascontiguousarray(g).reshape(-1, shape[-1]),
                    np.ascontiguousarray(out).reshape(-1, shape[-1]),
                )
                _acc(grads, bwd.in_ids[0], gx.reshape(shape))

    else:

        def bwd(g, grads):
            if req:
                gx = out * (g - (g * out).sum(axis=ax, keepdims=True))
                _acc(grads, bwd.in_ids[0], gx)

    return _record(Op.SOFTMAX, (x,), out, bwd)


def layernorm(x: Tensor, axis: int, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ShapeError(f"layernorm: eps must be > 0, got {eps}")
    ax = _norm_axis(axis, x.ndim, "layernorm")
    if _K.HAVE_NUMBA and ax == x.ndim - 1 and x.data.dtype == np.float32:
        shape = x.shape
        x2d = x.data.reshape(-1, shape[-1])
        xhat2d, inv_rows = _K.layernorm_fwd(x2d, np.float32(eps))
        req = x.requires_grad

        def bwd(g, grads):
            if req:
                gx = _K.layernorm_bwd(
                    np.ascontiguousarray(g).reshape(-1, shape[-1]), xhat2d, inv_rows
                )
                _acc(grads, bwd.in_ids[0], gx.reshape(shape))

        return _record(Op.LAYERNORM, (x,), xhat2d.reshape(shape), bwd)

    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    req = x.requires_grad

    def bwd(g, grads):
        if req:
            gm = g.mean(axis=ax, keepdims=True)
            gxm = (g * xhat).mean(axis=ax, keepdims=True)
            _acc(grads, bwd.in_ids[0], inv * (g - gm - xhat * gxm))

    return _record(Op.LAYERNORM, (x,), xhat.astype(x.data.dtype, copy=False), bwd)


_GELU_C = np.float32(0.7978845608028654)  # sqrt(2/pi)
_GELU_A = np.float32(0.044715)


def gelu(x: Tensor) -> Tensor:
    # forward stays on numpy (SIMD tanh beats a scalar loop); x*x*x, not x**3,
    # since libm pow is an order of magnitude slower
    xd = x.data
    x2 = xd * xd
    inner = x2 * xd
    inner *= _GELU_A
    inner += xd
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    out = t + np.float32(1.0)
    out *= xd
    out *= np.float32(0.5)
    req = x.requires_grad

    if _K.HAVE_NUMBA and xd.dtype == np.float32:

        def bwd(g, grads):
            if req:
                gx = _K.gelu_bwd(
                    np.ascontiguousarray(g).reshape(-1), xd.reshape(-1), t.reshape(-1)
                )
                _acc(grads, bwd.in_ids[0], gx.reshape(xd.shape))

    else:

        def bwd(g, grads):
            if req:
                dinner = x2 * np.float32(3.0 * _GELU_A)
                dinner += np.float32(1.0)
                dinner *= _GELU_C
                dt = t * t
                np.subtract(np.float32(1.0), dt, out=dt)
                dt *= dinner
                dt *= xd
                dt += t
                dt += np.float32(1.0)
                dt *= np.float32(0.5)
                dt *= g
                _acc(grads, bwd.in_ids[0], dt)

    return _record(Op.GELU, (x,), out, bwd)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (_norm_axis(axis, x.ndim, "mean"),)
    else:
        axes = tuple(_norm_axis(a, x.ndim, "mean") for a in axis)
    out = x.data.mean(axis=axes if axes else None)
    count = 1
    for a in axes:
        count *= x.shape[a]
    keep_shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    shape = x.shape
    req = x.requires_grad
    inv_count = np.asarray(1.0 / max(count, 1), dtype=x.data.dtype)

    def bwd(g, grads):
        if req:
            gx = np.broadcast_to(g.reshape(keep_shape) * inv_count, shape)
            _acc(grads, bwd.in_ids[0], np.ascontiguousarray(gx))

    return _record(Op.MEAN, (x,), np.asarray(out, dtype=x.data.dtype), bwd)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean() if diff.size else 0.0, dtype=diff.dtype)
    n = max(diff.size, 1)
    p_req, t_req = pred.requires_grad, target.requires_grad
    scale = np.asarray(2.0 / n, dtype=diff.dtype)

    def bwd(g, grads):
        gd = g * scale * diff
        if p_req:
            _acc(grads, bwd.in_ids[0], gd)
        if t_req:
            _acc(grads, bwd.in_ids[1], -gd)

    return _record(Op.MSE, (pred, target), out, bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean NLL over rows of 2-d `logits`; grads flow to logits only."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} != ({logits.shape[0]},)"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: target id out of range")
    n, c = logits.shape
    dt = logits.data.dtype
    if weights is None:
        w = np.ones(n, dtype=dt)
    else:
        w = np.asarray(weights, dtype=dt)
        if w.shape != (n,):
            raise ShapeError(f"cross_entropy: weights shape {w.shape} != ({n},)")
    denom = np.asarray(max(w.sum(), 1e-8), dtype=dt)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    loge = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.asarray(-(w * loge[rows, targets]).sum() / denom, dtype=dt)
    probs = np.exp(loge)
    req = logits.requires_grad

    def bwd(g, grads):
        if req:
            gl = probs.copy()
            gl[rows, targets] -= 1.0
            gl *= (g * w / denom)[:, None]
            _acc(grads, bwd.in_ids[0], gl.astype(dt, copy=False))

    return _record(Op.CROSS_ENTROPY, (logits,), out, bwd)


_OP_FNS = {
    Op.MATMUL: lambda inputs, attrs: matmul(*inputs),
    Op.ADD: lambda inputs, attrs: add(*inputs),
    Op.MULTIPLY: lambda inputs, attrs: multiply(*inputs),
    Op.TRANSPOSE: lambda inputs, attrs: transpose(inputs[0], attrs.get("axes")),
    Op.RESHAPE: lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    Op.CONCAT: lambda inputs, attrs: concat(inputs, attrs["axis"]),
    Op.SLICE: lambda inputs, attrs: slice_(inputs[0], attrs["begin"], attrs["size"]),
    Op.EMBEDDING_LOOKUP: lambda inputs, attrs: embedding_lookup(inputs[0], attrs["ids"]),
    Op.SOFTMAX: lambda inputs, attrs: softmax(inputs[0], attrs["axis"]),
    Op.LAYERNORM: lambda inputs, attrs: layernorm(
        inputs[0], attrs["axis"], attrs.get("eps", 1e-5)
    ),
    Op.GELU: lambda inputs, attrs: gelu(inputs[0]),
    Op.MEAN: lambda inputs, attrs: mean(inputs[0], attrs.get("axis")),
    Op.MSE: lambda inputs, attrs: mse(*inputs),
    Op.CROSS_ENTROPY: lambda inputs, attrs: cross_entropy(
        inputs[0], attrs["targets"], attrs.get("weights")
    ),
}


def apply(op: Op, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Uniform entry point: dispatch an op over input tensors with attributes."""
    if op not in _OP_FNS:
        raise ShapeError(f"apply: unknown op {op!r}")
    return _OP_FNS[op](list(inputs), attrs)


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between the tape gradient of f at x and central
    finite differences. f must be a pure Tensor -> scalar function.

    The tape gradient runs at the working float32 precision (the code under
    test); the finite-difference replay runs at float64 so the oracle's own
    rounding noise stays far below the tolerance it enforces.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be > 0, got {step}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        y = f(probe)
    if y.size != 1:
        raise TapeError(f"grad_check: f must return a scalar, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise NonFiniteError("grad_check: f(x) is not finite")
    g_tape = backward(y)[probe].data.reshape(-1).astype(np.float64)

    base = x.data.astype(np.float64)
    flat = base.reshape(-1)
    g_fd = np.empty(flat.size, dtype=np.float64)
    with precision(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            bumped = base.copy()
            bumped.reshape(-1)[i] = orig + step
            hi = float(f(Tensor(bumped)).data)
            bumped = base.copy()
            bumped.reshape(-1)[i] = orig - step
            lo = float(f(Tensor(bumped)).data)
            g_fd[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(g_tape), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_tape - g_fd) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# parameter construction helpers


def normal_param(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=tuple(shape)).astype(np.float32), requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float32), requires_grad=True)


def ones_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=np.float32), requires_grad=True)
