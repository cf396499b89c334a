"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value in the compute dtype (float32 except
inside finite-difference oracles) and records a closure that
maps the output gradient to one gradient per input (``None`` for inputs that
do not need one).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, compute_dtype as _dt, make_result

Scalar = Union[int, float]

LEAKY_SLOPE = 0.2


def _as_const(value, like: Tensor) -> np.ndarray:
    arr = np.asarray(value, dtype=_dt())
    if arr.ndim == 0:
        return arr
    if arr.shape != like.shape:
        raise ShapeError(f"constant operand shape {arr.shape} does not match tensor shape {like.shape}")
    return arr


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "add")
        return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    c = _as_const(b, a)
    return make_result(a.data + c, (a,), lambda g: (g,), "add_const")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "sub")
        return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    c = _as_const(b, a)
    return make_result(a.data - c, (a,), lambda g: (g,), "sub_const")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    """Product with a same-shape tensor, a same-shape constant array or a scalar."""
    if isinstance(b, Tensor):
        _check_same(a, b, "mul")
        ad, bd = a.data, b.data
        return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    c = _as_const(b, a)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # subgradient at 0 is 0
    s = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(_dt())
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    # subgradient at 0 is the slope
    scale = np.where(a.data > 0, _dt()(1.0), _dt()(slope)).astype(_dt())
    return make_result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(_dt())


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the channel axis."""
    if axis != 1:
        raise ShapeError("concatenation is only supported along the channel axis")
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat: non-channel extents differ: {tensors[0].shape} vs {t.shape}"
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, tensors, backward, "concat")


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=_dt())
        full[:, start:stop] = g
        return (full,)

    return make_result(a.data[:, start:stop].copy(), (a,), backward, "channel_slice")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, dtype=_dt()).reshape(1, 1, 1, 1)
    return make_result(out, (a,), lambda g: (np.broadcast_to(g.reshape(()), shape).astype(_dt()),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = (np.sum(a.data, dtype=_dt()) / _dt()(n)).reshape(1, 1, 1, 1).astype(_dt())

    def backward(g):
        return (np.full(shape, g.reshape(()) / _dt()(n), dtype=_dt()),)

    return make_result(out, (a,), backward, "mean")


def spatial_mean(a: Tensor) -> Tensor:
    """Mean over (H, W); returns (N, C, 1, 1)."""
    shape = a.shape
    hw = shape[2] * shape[3]
    out = a.data.mean(axis=(2, 3), keepdims=True, dtype=_dt())

    def backward(g):
        return (np.broadcast_to(g / _dt()(hw), shape).astype(_dt()),)

    return make_result(out, (a,), backward, "spatial_mean")


def instance_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean and unit variance."""
    x = a.data
    m = x.shape[2] * x.shape[3]
    mu = x.mean(axis=(2, 3), keepdims=True, dtype=_dt())
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True, dtype=_dt())
    inv = (1.0 / np.sqrt(var + _dt()(eps))).astype(_dt())
    xhat = xc * inv

    def backward(g):
        gs = g.sum(axis=(2, 3), keepdims=True)
        gx = (g * xhat).sum(axis=(2, 3), keepdims=True)
        return ((inv / _dt()(m)) * (_dt()(m) * g - gs - xhat * gx),)

    return make_result(xhat.astype(_dt()), (a,), backward, "instance_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_np(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n = x.shape[0]
    o, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ w.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_input_grad_np(g: np.ndarray, w: np.ndarray, in_hw: tuple, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`conv2d_np` with respect to its input (col2im)."""
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    gcols = (g.transpose(0, 2, 3, 1).reshape(-1, o) @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # n, c, kh, kw, ho, wo
    hp, wp = h + 2 * padding, wd + 2 * padding
    # extent of the region touched by the kernel sweep, may be short of the padded input
    hp_used = max(hp, (ho - 1) * stride + kh)
    wp_used = max(wp, (wo - 1) * stride + kw)
    dx = np.zeros((n, c, hp_used, wp_used), dtype=_dt())
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, :, i, j]
    return dx[:, :, padding:padding + h, padding:padding + wd]


def conv2d_weight_grad_np(g: np.ndarray, x: np.ndarray, w_shape: tuple, stride: int, padding: int) -> np.ndarray:
    o = w_shape[0]
    cols, _, _ = _im2col(x, w_shape[2], w_shape[3], stride, padding)
    gw = g.transpose(0, 2, 3, 1).reshape(-1, o).T @ cols
    return gw.reshape(w_shape)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; ``weight`` is (out_channels, in_channels, kh, kw)."""
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: weight {weight.shape} expects {ci} input channels, input {x.shape} has {c}")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: input {x.shape} with kernel {kh}x{kw}, stride {stride}, padding {padding} "
            f"gives empty output {ho}x{wo}"
        )
    if bias is not None and bias.shape != (1, o, 1, 1):
        raise ShapeError(f"conv2d: bias must have shape (1, {o}, 1, 1), got {bias.shape}")
    xd, wd = x.data, weight.data
    out = conv2d_np(xd, wd, stride, padding)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = conv2d_input_grad_np(g, wd, (h, w), stride, padding) if x.requires_grad else None
        gw = conv2d_weight_grad_np(g, xd, wd.shape, stride, padding) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out.astype(_dt(), copy=False), parents, backward, "conv2d")


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (in_channels, out_channels, kh, kw).

    Realized as the input-adjoint of :func:`conv2d`, so its own input
    gradient is a forward convolution with the same kernel.
    """
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d_transpose: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(
            f"conv2d_transpose: weight {weight.shape} expects {ci} input channels, input {x.shape} has {c}"
        )
    ho = conv_transpose_output_size(h, kh, stride, padding)
    wo = conv_transpose_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1 or conv_output_size(ho, kh, stride, padding) != h or conv_output_size(wo, kw, stride, padding) != w:
        raise ShapeError(
            f"conv2d_transpose: input {x.shape} with kernel {kh}x{kw}, stride {stride}, padding {padding} "
            "has no consistent output extent"
        )
    if bias is not None and bias.shape != (1, o, 1, 1):
        raise ShapeError(f"conv2d_transpose: bias must have shape (1, {o}, 1, 1), got {bias.shape}")
    xd, wd = x.data, weight.data
    out = conv2d_input_grad_np(xd, wd, (ho, wo), stride, padding)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = conv2d_np(g, wd, stride, padding) if x.requires_grad else None
        gw = conv2d_weight_grad_np(xd, g, wd.shape, stride, padding) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(np.ascontiguousarray(out, dtype=_dt()), parents, backward, "conv2d_transpose")


# ---------------------------------------------------------------------------
# bilinear resampling under a scale + shift transform
# ---------------------------------------------------------------------------

def source_coords(size: int, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Source pixel coordinate for every output pixel along one axis.

    The transform places the source: a source point at normalized position
    ``u`` lands at ``scale * u + shift``, with [-1, 1] spanning pixel centers
    0..size-1. Returns float64 array (N, size).
    """
    half = (size - 1) / 2.0
    j = np.arange(size, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1, 1)
    shift = np.asarray(shift, dtype=np.float64).reshape(-1, 1)
    return (j - half * (1.0 + shift)) / scale + half


def interpolation_matrices(coords: np.ndarray, size: int):
    """Per-sample (out, in) bilinear weight matrix and its derivative in the coordinate.

    Taps outside [0, size-1] read zero.
    """
    n, m = coords.shape
    lo = np.floor(coords)
    frac = coords - lo
    lo = lo.astype(np.int64)
    weights = np.zeros((n, m, size), dtype=np.float64)
    dweights = np.zeros((n, m, size), dtype=np.float64)
    rows = np.arange(m)
    for b in range(n):
        for tap, wt, dw in ((lo[b], 1.0 - frac[b], -1.0), (lo[b] + 1, frac[b], 1.0)):
            ok = (tap >= 0) & (tap < size)
            np.add.at(weights[b], (rows[ok], tap[ok]), wt[ok])
            np.add.at(dweights[b], (rows[ok], tap[ok]), dw)
    return weights.astype(_dt()), dweights.astype(_dt())


def warp_np(x: np.ndarray, wy: np.ndarray, wx: np.ndarray) -> np.ndarray:
    """out[n, c] = wy[n] @ x[n, c] @ wx[n].T"""
    return np.matmul(np.matmul(wy[:, None], x), np.swapaxes(wx, 1, 2)[:, None])


def grid_sample_bilinear(x: Tensor, affine: Tensor) -> Tensor:
    """Resample ``x`` under per-sample (sx, sy, tx, ty) placement.

    ``affine`` has shape (N, 4, 1, 1). Translations are in normalized units
    where [-1, 1] spans the image; pixels mapped from outside the source are
    zero.
    """
    n, c, h, w = x.shape
    if affine.shape != (n, 4, 1, 1):
        raise ShapeError(f"grid_sample_bilinear: affine must be ({n}, 4, 1, 1), got {affine.shape}")
    if h < 2 or w < 2:
        raise ShapeError(f"grid_sample_bilinear: spatial extents must be >= 2, got {h}x{w}")
    p = affine.data.reshape(n, 4).astype(np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("grid_sample_bilinear: affine parameters must be finite")
    sx, sy, tx, ty = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    px = source_coords(w, sx, tx)
    py = source_coords(h, sy, ty)
    wx, dwx = interpolation_matrices(px, w)
    wy, dwy = interpolation_matrices(py, h)
    xd = x.data
    out = warp_np(xd, wy, wx)

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = np.matmul(np.matmul(np.swapaxes(wy, 1, 2)[:, None], g), wx[:, None])
        ga = None
        if affine.requires_grad:
            # d out / d px[n, l] only touches output column l (separable warp)
            gpx = (g * warp_np(xd, wy, dwx)).sum(axis=(1, 2), dtype=np.float64)  # (n, w)
            gpy = (g * warp_np(xd, dwy, wx)).sum(axis=(1, 3), dtype=np.float64)  # (n, h)
            hx, hy = (w - 1) / 2.0, (h - 1) / 2.0
            jx = np.arange(w, dtype=np.float64)
            jy = np.arange(h, dtype=np.float64)
            gsx = (gpx * (-(jx - hx * (1.0 + tx[:, None])) / (sx[:, None] ** 2))).sum(axis=1)
            gtx = (gpx * (-hx / sx[:, None])).sum(axis=1)
            gsy = (gpy * (-(jy - hy * (1.0 + ty[:, None])) / (sy[:, None] ** 2))).sum(axis=1)
            gty = (gpy * (-hy / sy[:, None])).sum(axis=1)
            ga = np.stack([gsx, gsy, gtx, gty], axis=1).reshape(n, 4, 1, 1).astype(_dt())
        return gx, ga

    return make_result(out.astype(_dt(), copy=False), (x, affine), backward, "grid_sample_bilinear")


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits, stable for any logit magnitude."""
    if isinstance(targets, Tensor):
        _check_same(logits, targets, "bce_with_logits")
        t = targets.data
    else:
        t = np.asarray(targets, dtype=_dt())
        if t.ndim:
            if t.shape != logits.shape:
                raise ShapeError(f"bce_with_logits: shape mismatch {logits.shape} vs {t.shape}")
        else:
            t = np.full(logits.shape, t, dtype=_dt())
    if np.any((t < 0) | (t > 1)):
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    x = logits.data
    n = x.size
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = (np.sum(per, dtype=_dt()) / _dt()(n)).reshape(1, 1, 1, 1).astype(_dt())

    def backward(g):
        gl = (_sigmoid_np(x) - t) * (g.reshape(()) / _dt()(n))
        gt = None
        if isinstance(targets, Tensor) and targets.requires_grad:
            gt = -x * (g.reshape(()) / _dt()(n))
        return (gl.astype(_dt()), gt)

    parents = (logits, targets) if isinstance(targets, Tensor) else (logits,)
    if not isinstance(targets, Tensor):
        return make_result(out, parents, lambda g: backward(g)[:1], "bce_with_logits")
    return make_result(out, parents, backward, "bce_with_logits")


def scale_shift(a: Tensor, scale: float, shift: float) -> Tensor:
    """``a * scale + shift`` with scalar coefficients."""
    return make_result((a.data * _dt()(scale) + _dt()(shift)).astype(_dt()), (a,), lambda g: (g * _dt()(scale),), "scale_shift")


def log_scale_to_range(a: Tensor, bound: float) -> Tensor:
    """Map unbounded values to [1/bound, bound] via exp(log(bound) * tanh(a))."""
    k = math.log(bound)
    th = np.tanh(a.data)
    out = np.exp(_dt()(k) * th).astype(_dt())
    return make_result(out, (a,), lambda g: (g * out * _dt()(k) * (1.0 - th * th),), "log_scale_to_range")
