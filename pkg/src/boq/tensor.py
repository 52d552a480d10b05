"""Dense tensors with tape-based reverse-mode automatic differentiation.

Everything is double precision and row-major. Operations executed inside a
``with Tape() as tape:`` block are recorded; ``backward(loss, tape)`` then
walks the recording in reverse and accumulates gradients into the ``grad``
slot of every tensor that requires them. Outside a tape, operations compute
normally with no recording overhead.

Any operation whose output contains NaN or Inf raises ``NumericsError``
immediately instead of letting the values propagate.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericsError,
)

DTYPE = np.float64

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "exp",
    "log",
    "transpose",
    "reshape",
    "concat",
    "mean",
    "tensor_sum",
    "exact_sum",
    "take",
    "softmax",
    "layer_norm",
    "l2_normalize",
    "l2_normalize_rows",
    "expand_batch",
    "conv2d",
    "backward",
    "finite_difference_check",
]


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by '{op}'")
    return arr


class Tensor:
    """A dense n-dimensional array with an optional gradient slot.

    ``data`` is a float64 ndarray (row-major). Tensors are treated as
    immutable once created; the only sanctioned in-place mutation is the
    optimizer's parameter update between training steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

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
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Thin operator sugar over the module-level ops.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap plain data in a constant Tensor; pass Tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for one reverse pass.

    Records are appended in execution order, so inputs always precede the
    operations that consume them; ``backward`` visits each record exactly
    once, in reverse. A tape is confined to one logical thread and is meant
    to be created fresh for every training step.
    """

    __slots__ = ("_records",)

    def __init__(self):
        # Each record is (output, inputs, rule); rule maps the output
        # gradient to one gradient (or None) per input.
        self._records: list[tuple] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        self._records.clear()


def _record(out: Tensor, inputs: tuple, rule: Callable) -> None:
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1]._records.append((out, inputs, rule))


def _result(
    data: np.ndarray, inputs: tuple, rule: Callable, op: Optional[str]
) -> Tensor:
    # op=None marks pure data movement, which cannot create non-finite
    # values from finite inputs; everything else is checked.
    if op is not None:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    _record(out, inputs, rule)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every leaf tensor.

    ``loss`` must be a scalar recorded on ``tape``. Gradients land on the
    tensors that were *not* produced by this tape (parameters and inputs);
    repeated calls without clearing accumulate, each contributing one full
    gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    records = tape._records
    if not any(rec[0] is loss for rec in records):
        raise ContractError("loss is not an output recorded on this tape")

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, rule in reversed(records):
        # Each tensor is produced by exactly one record, so its gradient is
        # complete (all consumers sit later on the tape) and can be popped.
        g = acc.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                gi = gi.reshape(t.data.shape)
            k = id(t)
            if k in acc:
                acc[k] = acc[k] + gi
            else:
                acc[k] = gi
                holders[k] = t
    for k, g in acc.items():
        t = holders[k]
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise / structural operations
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


def add(a, b) -> Tensor:
    """Elementwise sum (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    rule = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    """Elementwise difference."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    rule = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    rule = lambda g: (
        _unbroadcast(g * b.data, a.shape),
        _unbroadcast(g * a.data, b.shape),
    )
    return _result(a.data * b.data, (a, b), rule, "mul")


def relu(x) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is defined as 0."""
    x = as_tensor(x)
    mask = x.data > 0
    rule = lambda g: (g * mask,)
    return _result(np.where(mask, x.data, 0.0), (x,), rule, "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out_data = np.exp(x.data)
    rule = lambda g: (g * out_data,)
    return _result(out_data, (x,), rule, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)
    rule = lambda g: (g / x.data,)
    return _result(out_data, (x,), rule, "log")


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; defaults to reversing them."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    else:
        axes = tuple(axes)
        if sorted(axes) != list(range(x.ndim)):
            raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    rule = lambda g: (np.ascontiguousarray(g.transpose(inverse)),)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), rule, None)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    rule = lambda g: (g.reshape(x.shape),)
    return _result(x.data.reshape(shape), (x,), rule, None)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: need at least one tensor")
    nd = ts[0].ndim
    if axis < -nd or axis >= nd:
        raise DimensionError(f"concat: axis {axis} invalid for ndim {nd}")
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {ts[0].shape} and {t.shape} disagree off axis {ax}"
            )
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), rule, None)


def _axis_count(shape: tuple, axis: Optional[int]) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    return shape[axis]


def mean(x, axis: Optional[int] = None) -> Tensor:
    """Arithmetic mean over ``axis`` (all elements when axis is None)."""
    x = as_tensor(x)
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"mean: axis {axis} invalid for shape {x.shape}")
    n = _axis_count(x.shape, axis)

    def rule(g):
        if axis is None:
            return (np.full(x.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return _result(np.mean(x.data, axis=axis), (x,), rule, "mean")


def tensor_sum(x, axis: Optional[int] = None) -> Tensor:
    """Sum over ``axis`` (all elements when axis is None)."""
    x = as_tensor(x)
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"sum: axis {axis} invalid for shape {x.shape}")

    def rule(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.sum(x.data, axis=axis), (x,), rule, "sum")


def exact_sum(x) -> Tensor:
    """Exactly rounded sum of all elements (order independent).

    Uses compensated summation so that permuting the inputs cannot change
    the result by even one ulp. Used where bit-level permutation invariance
    is part of the contract.
    """
    x = as_tensor(x)
    total = math.fsum(x.data.ravel().tolist())
    rule = lambda g: (np.full(x.shape, float(g)),)
    return _result(np.asarray(total, dtype=DTYPE), (x,), rule, "exact_sum")


def take(x, indices) -> Tensor:
    """Gather elements of the flattened tensor at the given indices."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise DimensionError(f"take: index out of range for size {x.size}")

    def rule(g):
        gx = np.zeros(x.size, dtype=DTYPE)
        np.add.at(gx, idx, g.ravel())
        return (gx.reshape(x.shape),)

    return _result(x.data.ravel()[idx], (x,), rule, None)


# ---------------------------------------------------------------------------
# Linear algebra and normalization
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes.

    Supported layouts: plain 2-D x 2-D, batched with identical leading
    dimensions, and batched-by-2-D (a linear map applied to every leading
    slice of ``a``).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    need_a, need_b = a.requires_grad, b.requires_grad
    if b.ndim == 2:

        def rule(g):
            ga = g @ b.data.T if need_a else None
            if need_b:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = None
            return (ga, gb)

    elif a.shape[:-2] == b.shape[:-2]:

        def rule(g):
            ga = g @ b.data.swapaxes(-1, -2) if need_a else None
            gb = a.data.swapaxes(-1, -2) @ g if need_b else None
            return (ga, gb)

    else:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    return _result(a.data @ b.data, (a, b), rule, "matmul")


def softmax(x, axis: int = -1) -> Tensor:
    """Shifted softmax along ``axis``; each slice sums to 1.

    The running maximum is subtracted before exponentiation, so arbitrarily
    large (finite) inputs cannot overflow.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def rule(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return _result(out_data, (x,), rule, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then
    apply a learned per-feature gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature dim {d}"
        )
    if eps <= 0:
        raise DimensionError("layer_norm: eps must be positive")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    need_x, need_gain, need_bias = x.requires_grad, gain.requires_grad, bias.requires_grad

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=lead) if need_gain else None
        gbias = np.sum(g, axis=lead) if need_bias else None
        gx = None
        if need_x:
            gh = g * gain.data
            gx = inv * (
                gh
                - np.mean(gh, axis=-1, keepdims=True)
                - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)
            )
        return (gx, ggain, gbias)

    return _result(out_data, (x, gain, bias), rule, "layer_norm")


def l2_normalize(v) -> Tensor:
    """Scale a vector to unit Euclidean norm; zero vectors are rejected."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise DimensionError(f"l2_normalize: expected a vector, got shape {v.shape}")
    norm = float(np.linalg.norm(v.data))
    if norm == 0.0:
        raise DegenerateInputError("l2_normalize: zero vector has no direction")
    out_data = v.data / norm

    def rule(g):
        return ((g - out_data * np.dot(out_data, g)) / norm,)

    return _result(out_data, (v,), rule, "l2_normalize")


def l2_normalize_rows(x) -> Tensor:
    """Normalize the last axis of a stack of vectors to unit norm."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"l2_normalize_rows: expected >=2-D, got shape {x.shape}")
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize_rows: zero row has no direction")
    out_data = x.data / norms

    def rule(g):
        dots = np.sum(out_data * g, axis=-1, keepdims=True)
        return ((g - out_data * dots) / norms,)

    return _result(out_data, (x,), rule, "l2_normalize_rows")


def expand_batch(x, batch: int) -> Tensor:
    """Replicate a tensor along a new leading axis of size ``batch``."""
    x = as_tensor(x)
    if batch < 1:
        raise DimensionError(f"expand_batch: batch must be >= 1, got {batch}")
    rule = lambda g: (g.sum(axis=0),)
    return _result(
        np.broadcast_to(x.data, (batch, *x.shape)).copy(), (x,), rule, None
    )


# ---------------------------------------------------------------------------
# 2-D convolution (channels-first, optionally batched)
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """[B, C, H, W] -> ([C*kh*kw, B*oh*ow], oh, ow); one GEMM per conv."""
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xt = xp.transpose(1, 0, 2, 3)  # [C, B, H', W'] view
    cols = np.empty((c, kh, kw, b, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ]
    return cols.reshape(c * kh * kw, b * oh * ow), oh, ow


def _col2im(gcols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = xshape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    gpad = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    gc = gcols.reshape(c, kh, kw, b, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gc[
                :, i, j
            ]
    out = gpad.transpose(1, 0, 2, 3)
    return out[:, :, pad : pad + h, pad : pad + w] if pad else out


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of channels-first images.

    x: [C, H, W] or [B, C, H, W]; weight: [C_out, C, kh, kw]; bias: [C_out].
    Output spatial size is (H + 2*padding - kh)//stride + 1.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim not in (3, 4) or weight.ndim != 4:
        raise DimensionError(
            f"conv2d: expected [B,C,H,W] or [C,H,W] and [Cout,C,kh,kw], "
            f"got {x.shape} and {weight.shape}"
        )
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    cout, cin, kh, kw = weight.shape
    if cin != xb.shape[1]:
        raise DimensionError(f"conv2d: input channels {xb.shape[1]} != kernel channels {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    _, _, h, w = xb.shape
    if (h + 2 * padding - kh) < 0 or (w + 2 * padding - kw) < 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    cols, oh, ow = _im2col(xb, kh, kw, stride, padding)
    nb = xb.shape[0]
    wmat = weight.data.reshape(cout, cin * kh * kw)
    flat = wmat @ cols + bias.data[:, None]  # [Cout, B*oh*ow]
    out_data = np.ascontiguousarray(
        flat.reshape(cout, nb, oh, ow).transpose(1, 0, 2, 3)
    )
    if not batched:
        out_data = out_data[0]

    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias.requires_grad

    def rule(g):
        gm = np.ascontiguousarray(
            g.reshape(nb, cout, oh, ow).transpose(1, 0, 2, 3)
        ).reshape(cout, nb * oh * ow)
        gb = gm.sum(axis=1) if need_b else None
        gw = (gm @ cols.T).reshape(weight.shape) if need_w else None
        gx = None
        if need_x:
            gx = _col2im(wmat.T @ gm, xb.shape, kh, kw, stride, padding)
            gx = gx if batched else gx[0]
        return (gx, gw, gb)

    return _result(out_data, (x, weight, bias), rule, "conv2d")


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6
) -> float:
    """Compare analytic gradients of scalar-valued ``f`` against central
    finite differences at ``x``.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    ``f`` must be a pure function of the *values* of ``x`` (it may close over
    other constants); it is re-evaluated with perturbed copies of ``x.data``.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"finite_difference_check: f returned shape {out.shape}")
    backward(out, tape)
    analytic = (
        probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)
    )

    flat = probe.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        hi_x = orig + step
        lo_x = orig - step
        flat[i] = hi_x
        hi = f(probe).item()
        flat[i] = lo_x
        lo = f(probe).item()
        flat[i] = orig
        # Divide by the step actually applied after rounding, not 2*step.
        numeric = (hi - lo) / (hi_x - lo_x)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst
