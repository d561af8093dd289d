"""Differentiable operations over ``Tensor``.

Broadcasting is deliberately narrow: a binary elementwise op accepts either a
scalar operand or two operands of identical shape. Anything else must go
through the explicit ``broadcast_to`` op so that the reduction in its backward
pass is visible at the call site.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import Tensor


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return False
    return np.ndim(x) == 0


# ---------------------------------------------------------------------------
# elementwise


def _binary(op: str, a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = np.asarray(b, dtype=a.dtype)
        return _binary_scalar(op, a, s)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar or exact-shape operands)")
    x, y = a.data, b.data
    if op == "add":
        out = x + y
        bw = lambda g: (g, g)
    elif op == "sub":
        out = x - y
        bw = lambda g: (g, -g)
    elif op == "mul":
        out = x * y
        bw = lambda g: (g * y, g * x)
    elif op == "div":
        out = x / y
        bw = lambda g: (g / y, -g * x / (y * y))
    else:
        raise ValueError(op)
    return Tensor.from_op(out, op, (a, b), bw)


def _binary_scalar(op: str, a: Tensor, s: np.ndarray) -> Tensor:
    x = a.data
    if op == "add":
        out = x + s
        bw = lambda g: (g,)
    elif op == "sub":
        out = x - s
        bw = lambda g: (g,)
    elif op == "rsub":
        out = s - x
        bw = lambda g: (-g,)
    elif op == "mul":
        out = x * s
        bw = lambda g: (g * s,)
    elif op == "div":
        out = x / s
        bw = lambda g: (g / s,)
    elif op == "rdiv":
        out = s / x
        bw = lambda g: (-g * s / (x * x),)
    else:
        raise ValueError(op)
    return Tensor.from_op(out, op, (a,), bw)


def add(a, b) -> Tensor:
    return _binary("add", as_tensor(a), b)


def sub(a, b) -> Tensor:
    return _binary("sub", as_tensor(a), b)


def mul(a, b) -> Tensor:
    return _binary("mul", as_tensor(a), b)


def div(a, b) -> Tensor:
    return _binary("div", as_tensor(a), b)


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    out = x ** p
    return Tensor.from_op(out, "pow", (a,), lambda g: (g * p * x ** (p - 1),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return Tensor.from_op(x * x, "square", (a,), lambda g: (2 * g * x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor.from_op(np.log(x), "log", (a,), lambda g: (g / x,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    # subgradient 0 at x == 0
    return Tensor.from_op(np.where(mask, x, 0).astype(x.dtype), "relu", (a,), lambda g: (g * mask,))


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, relu, exp, log, neg, square."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"relu": relu, "exp": exp, "log": log, "neg": neg, "square": square}
    if kind in binary:
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    out = []
    for ax in axes:
        ax = int(ax)
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _normalize_axes(axes, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _normalize_axes(axes, a.ndim)
    count = 1
    for i in ax:
        count *= a.shape[i]
    return mul(sum(a, ax, keepdims), 1.0 / count)


def reduce(kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return sum(a, axes, keepdims)
    if kind == "mean":
        return mean(a, axes, keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor.from_op(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor.from_op(out, "transpose", (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; backward sums over the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return Tensor.from_op(out, "broadcast_to", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, "concat", tuple(tensors), bw)


# ---------------------------------------------------------------------------
# channel softmax


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax_channel(logits: Tensor, axis: int = 1) -> Tensor:
    """Softmax over the channel axis, max-subtracted for stability."""
    x = logits.data
    if x.shape[axis] < 2:
        raise ShapeError("softmax_channel needs at least two channels")
    _check_finite(x, "softmax_channel")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, "softmax", (logits,), bw)


def log_softmax_channel(logits: Tensor, axis: int = 1) -> Tensor:
    x = logits.data
    if x.shape[axis] < 2:
        raise ShapeError("log_softmax_channel needs at least two channels")
    _check_finite(x, "log_softmax_channel")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, "log_softmax", (logits,), bw)


# ---------------------------------------------------------------------------
# volumetric layers


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int or a 3-tuple, got {v}")
    return v


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"extent {extent} with kernel {kernel}, stride {stride}, pad {pad} "
            "does not give an integral output extent"
        )
    return span // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Direct 3D cross-correlation of ``x[B,Cin,D,H,W]`` with ``weight[Cout,Cin,kd,kh,kw]``.

    The kernel taps are gathered into a channels-last column buffer so the
    contraction becomes a single matrix product; the backward pass scatters
    the column gradient back tap by tap in a fixed order.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    B, cin, *ext = x.shape
    cout, wcin, *ks = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    st = _triple(stride)
    pd = _triple(pad)
    outx = tuple(conv_output_extent(e, k, s, p) for e, k, s, p in zip(ext, ks, st, pd))
    Do, Ho, Wo = outx
    kd, kh, kw = ks
    taps = kd * kh * kw

    xl = x.data.transpose(0, 2, 3, 4, 1)
    if any(pd):
        D, H, W = ext
        buf = np.zeros((B, D + 2 * pd[0], H + 2 * pd[1], W + 2 * pd[2], cin), dtype=x.dtype)
        buf[:, pd[0]:pd[0] + D, pd[1]:pd[1] + H, pd[2]:pd[2] + W] = xl
        xl = buf
    padded_shape = xl.shape
    slices = [
        (
            slice(None),
            slice(a, a + st[0] * (Do - 1) + 1, st[0]),
            slice(b, b + st[1] * (Ho - 1) + 1, st[1]),
            slice(c, c + st[2] * (Wo - 1) + 1, st[2]),
            slice(None),
        )
        for a in range(kd) for b in range(kh) for c in range(kw)
    ]

    cols = np.empty((B, Do, Ho, Wo, taps, cin), dtype=x.dtype)
    for t, sl in enumerate(slices):
        cols[:, :, :, :, t, :] = xl[sl]
    cols = cols.reshape(B * Do * Ho * Wo, taps * cin)
    wmat = weight.data.transpose(2, 3, 4, 1, 0).reshape(taps * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Do, Ho, Wo, cout).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)

    def bw(g):
        gl = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (cols.T @ gl).reshape(kd, kh, kw, cin, cout).transpose(4, 3, 0, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gl.sum(axis=0)
        if x.requires_grad:
            gcols = (gl @ wmat.T).reshape(B, Do, Ho, Wo, taps, cin)
            gxl = np.zeros(padded_shape, dtype=g.dtype)
            for t, sl in enumerate(slices):
                gxl[sl] += gcols[:, :, :, :, t, :]
            D, H, W = ext
            gxl = gxl[:, pd[0]:pd[0] + D, pd[1]:pd[1] + H, pd[2]:pd[2] + W, :]
            gx = np.ascontiguousarray(gxl.transpose(0, 4, 1, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, "conv3d", inputs, bw)


def upsample_nearest3d(x: Tensor, factor) -> Tensor:
    fd, fh, fw = _triple(factor)
    if min(fd, fh, fw) < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 5:
        raise ShapeError(f"upsample_nearest3d expects a 5-D input, got {x.shape}")
    B, C, D, H, W = x.shape
    if (fd, fh, fw) == (1, 1, 1):
        return Tensor.from_op(x.data.copy(), "upsample", (x,), lambda g: (g,))
    big = (B, C, D, fd, H, fh, W, fw)
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None], big).reshape(B, C, D * fd, H * fh, W * fw)

    def bw(g):
        return (g.reshape(big).sum(axis=(3, 5, 7)),)

    return Tensor.from_op(out, "upsample", (x,), bw)


def instance_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over its spatial extent, then apply gain and shift."""
    if x.ndim < 3:
        raise ShapeError(f"instance_norm expects [B,C,...], got {x.shape}")
    B, C = x.shape[:2]
    if gain.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"instance_norm: gain/shift must have shape ({C},)")
    spatial = tuple(range(2, x.ndim))
    n = int(np.prod(x.shape[2:]))
    if n < 2:
        raise ShapeError("instance_norm needs at least two spatial voxels")
    bshape = (1, C) + (1,) * len(spatial)
    xd = x.data
    mu = xd.mean(axis=spatial, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=spatial, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g_ = gain.data.reshape(bshape)
    out = xhat * g_ + shift.data.reshape(bshape)

    def bw(g):
        gx = ggain = gshift = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=(0,) + spatial)
        if shift.requires_grad:
            gshift = g.sum(axis=(0,) + spatial)
        if x.requires_grad:
            dxhat = g * g_
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=spatial, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=spatial, keepdims=True)
            )
        return gx, ggain, gshift

    return Tensor.from_op(out, "instance_norm", (x, gain, shift), bw)


# ---------------------------------------------------------------------------
# operator overloads


def _bind() -> None:
    T = Tensor
    T.__add__ = lambda a, b: add(a, b)
    T.__radd__ = lambda a, b: add(a, b)
    T.__sub__ = lambda a, b: sub(a, b)
    T.__rsub__ = lambda a, b: _binary_scalar("rsub", a, np.asarray(b, dtype=a.dtype)) if _is_scalar(b) else sub(as_tensor(b, a.dtype), a)
    T.__mul__ = lambda a, b: mul(a, b)
    T.__rmul__ = lambda a, b: mul(a, b)
    T.__truediv__ = lambda a, b: div(a, b)
    T.__rtruediv__ = lambda a, b: _binary_scalar("rdiv", a, np.asarray(b, dtype=a.dtype)) if _is_scalar(b) else div(as_tensor(b, a.dtype), a)
    T.__neg__ = lambda a: neg(a)
    T.__pow__ = lambda a, p: square(a) if p == 2 else power(a, p)
    T.sum = lambda a, axes=None, keepdims=False: sum(a, axes, keepdims)
    T.mean = lambda a, axes=None, keepdims=False: mean(a, axes, keepdims)
    T.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
    T.transpose = lambda a, *axes: transpose(a, axes[0] if len(axes) == 1 and not isinstance(axes[0], int) else axes)
    T.exp = lambda a: exp(a)
    T.log = lambda a: log(a)
    T.relu = lambda a: relu(a)


_bind()
