"""Differentiable primitives on :class:`Tensor`.

Each public function validates shapes, then dispatches to a registered kernel via
:func:`dvxfuse.autodiff.apply`.  Kernels are plain numpy on float64 arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import apply, register
from .tensor import ConvSpec, DimensionError, PoolKind, Tensor, as_pair


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


def _require4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what}: expected (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise add / mul with the restricted broadcast patterns

def _broadcast_ok(a: Tuple[int, ...], b: Tuple[int, ...]) -> bool:
    if a == b:
        return True
    if len(a) != 4 or len(b) != 4:
        return False
    n, c, h, w = a
    bn, bc, bh, bw = b
    if bn not in (1, n):
        return False
    return (bc, bh, bw) in ((c, 1, 1), (1, h, w), (c, h, w))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _add_fwd(a, b):
    return a + b, (a.shape, b.shape)


def _add_bwd(g, saved):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


register("add", backward=_add_bwd, flops=lambda ins, out: out.size)(_add_fwd)


def _mul_fwd(a, b):
    return a * b, (a, b)


def _mul_bwd(g, saved):
    a, b = saved
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


register("mul", backward=_mul_bwd, flops=lambda ins, out: out.size)(_mul_fwd)


def _order(a: Tensor, b: Tensor, what: str):
    if _broadcast_ok(a.shape, b.shape):
        return a, b
    if _broadcast_ok(b.shape, a.shape):
        return b, a
    raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be (N|1, C, 1, 1), (N|1, 1, H, W) or (1, C, H, W)."""
    a, b = _order(a, b, "add")
    return apply("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with the same broadcast patterns as :func:`add`."""
    a, b = _order(a, b, "mul")
    return apply("mul", a, b)


def _scale_fwd(x, factor):
    return x * factor, None


register("scale", backward=lambda g, saved, factor: (g * factor,),
         flops=lambda ins, out, factor: out.size)(_scale_fwd)


def scale(x: Tensor, factor: float) -> Tensor:
    return apply("scale", x, factor=float(factor))


def _add_bias_fwd(x, b):
    shape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    return x + b.reshape(shape), x.ndim


def _add_bias_bwd(g, ndim):
    axes = (0,) + tuple(range(2, ndim))
    return g, g.sum(axis=axes)


register("add_bias", backward=_add_bias_bwd, flops=lambda ins, out: out.size)(_add_bias_fwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector along axis 1."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis 1 of {x.shape}")
    return apply("add_bias", x, b)


# ---------------------------------------------------------------------------
# convolution

def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _unpad(g, ph, pw):
    h, w = g.shape[2], g.shape[3]
    return g[:, :, ph:h - ph, pw:w - pw]


def _windows(xp, kh, kw, sh, sw):
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    """(C·kh·kw, N·Ho·Wo) column matrix of a padded (N, C, H, W) input."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _conv_dense(xp, w, kh, kw, sh, sw, ho, wo):
    n = xp.shape[0]
    o = w.shape[0]
    if kh == kw == 1 and sh == sw == 1:
        cols = None
        out = np.tensordot(w[:, :, 0, 0], xp, axes=([1], [1]))  # (O, N, H, W)
    else:
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
        out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cols


def _conv_dense_bwd(g, xp, cols, w, kh, kw, sh, sw):
    o, c = w.shape[:2]
    n, _, ho, wo = g.shape
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
    if cols is None:
        x2 = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(c, -1)
        gw = (g2 @ x2.T)[:, :, None, None]
        gx = (w[:, :, 0, 0].T @ g2).reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw
    gw = (g2 @ cols.T).reshape(w.shape)
    gcol = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((c, n) + xp.shape[2:])
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gcol[:, i, j]
    return gxp.transpose(1, 0, 2, 3), gw


def _conv_depthwise(xp, w, kh, kw, sh, sw, ho, wo):
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] \
                * w[:, 0, i, j][None, :, None, None]
    return out


def _conv_depthwise_bwd(g, xp, w, kh, kw, sh, sw):
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + sh * (ho - 1) + 1, sh),
                  slice(j, j + sw * (wo - 1) + 1, sw))
            gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
            gxp[sl] += g * w[:, 0, i, j][None, :, None, None]
    return gxp, gw


def _conv_fwd(x, w, *bias, spec: ConvSpec):
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    xp = _pad(x, ph, pw)
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    if spec.is_depthwise and spec.groups > 1:
        out = _conv_depthwise(xp, w, kh, kw, sh, sw, ho, wo)
        cols = None
    elif spec.groups == 1:
        out, cols = _conv_dense(xp, w, kh, kw, sh, sw, ho, wo)
    else:
        gi, go = spec.in_channels // spec.groups, spec.out_channels // spec.groups
        parts = [_conv_dense(xp[:, k * gi:(k + 1) * gi], w[k * go:(k + 1) * go], kh, kw, sh, sw, ho, wo)
                 for k in range(spec.groups)]
        out = np.concatenate([p[0] for p in parts], axis=1)
        cols = [p[1] for p in parts]
    if bias:
        out += bias[0][None, :, None, None]
    return out, (xp, cols, w, bool(bias))


def _conv_bwd(g, saved, spec: ConvSpec):
    xp, cols, w, has_bias = saved
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    if spec.is_depthwise and spec.groups > 1:
        gxp, gw = _conv_depthwise_bwd(g, xp, w, kh, kw, sh, sw)
    elif spec.groups == 1:
        gxp, gw = _conv_dense_bwd(g, xp, cols, w, kh, kw, sh, sw)
    else:
        gi, go = spec.in_channels // spec.groups, spec.out_channels // spec.groups
        parts = [_conv_dense_bwd(g[:, k * go:(k + 1) * go], xp[:, k * gi:(k + 1) * gi], cols[k],
                                 w[k * go:(k + 1) * go], kh, kw, sh, sw)
                 for k in range(spec.groups)]
        gxp = np.concatenate([p[0] for p in parts], axis=1)
        gw = np.concatenate([p[1] for p in parts], axis=0)
    gx = _unpad(gxp, ph, pw)
    grads = [gx, gw]
    if has_bias:
        grads.append(g.sum(axis=(0, 2, 3)))
    return grads


def _conv_flops(ins, out, spec: ConvSpec):
    kh, kw = spec.kernel
    macs = out.size * (spec.in_channels // spec.groups) * kh * kw
    return 2 * macs + (out.size if len(ins) == 3 else 0)


register("conv2d", backward=_conv_bwd, flops=_conv_flops)(_conv_fwd)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """2D cross-correlation with zero padding; output size floor((H+2p−k)/s)+1."""
    _require4(x, "conv2d input")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"conv2d: channel axis of input is {x.shape[1]}, expected {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise DimensionError(f"conv2d: weight shape {w.shape}, expected {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d: bias shape {b.shape}, expected ({spec.out_channels},)")
    (kh, kw), (ph, pw) = spec.kernel, spec.padding
    if x.shape[2] + 2 * ph < kh:
        raise DimensionError(f"conv2d: height axis {x.shape[2]} (+pad) smaller than kernel {kh}")
    if x.shape[3] + 2 * pw < kw:
        raise DimensionError(f"conv2d: width axis {x.shape[3]} (+pad) smaller than kernel {kw}")
    args = (x, w) if b is None else (x, w, b)
    return apply("conv2d", *args, spec=spec)


# ---------------------------------------------------------------------------
# pooling

def _pool_fwd(x, kind: PoolKind, kernel, stride, padding):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    xp = _pad(x, ph, pw)
    win = _windows(xp, kh, kw, sh, sw)
    n, c, ho, wo = win.shape[:4]
    if kind is PoolKind.MAX:
        flat = win.reshape(n, c, ho, wo, kh * kw)
        arg = np.argmax(flat, axis=-1)  # first occurrence on ties
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (xp.shape, arg)
    return win.mean(axis=(-2, -1)), (xp.shape, None)


def _pool_bwd(g, saved, kind: PoolKind, kernel, stride, padding):
    shape, arg = saved
    kh, kw = kernel
    sh, sw = stride
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + sh * (ho - 1) + 1, sh),
                  slice(j, j + sw * (wo - 1) + 1, sw))
            if kind is PoolKind.MAX:
                gxp[sl] += g * (arg == i * kw + j)
            else:
                gxp[sl] += g / (kh * kw)
    return (_unpad(gxp, *padding),)


register("pool2d", backward=_pool_bwd,
         flops=lambda ins, out, kind, kernel, stride, padding: out.size * kernel[0] * kernel[1])(_pool_fwd)


def _gpool_fwd(x, kind: PoolKind):
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    if kind is PoolKind.MAX:
        arg = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)
        return out.reshape(n, c, 1, 1), (x.shape, arg)
    return flat.mean(axis=-1).reshape(n, c, 1, 1), (x.shape, None)


def _gpool_bwd(g, saved, kind: PoolKind):
    shape, arg = saved
    n, c, h, w = shape
    if kind is PoolKind.MAX:
        gx = np.zeros((n, c, h * w))
        np.put_along_axis(gx, arg[..., None], g.reshape(n, c, 1), axis=-1)
        return (gx.reshape(shape),)
    return (np.broadcast_to(g / (h * w), shape).copy(),)


register("global_pool", backward=_gpool_bwd, flops=lambda ins, out, kind: ins[0].size)(_gpool_fwd)


def pool2d(x: Tensor, kind: PoolKind, kernel=None, stride=None, padding=(0, 0),
           global_pool: bool = False) -> Tensor:
    """Max/average pooling; ``global_pool`` reduces all of H·W to (N, C, 1, 1).

    Max ties resolve to the first row-major index in the window.
    """
    _require4(x, "pool2d input")
    if global_pool:
        return apply("global_pool", x, kind=kind)
    kernel = as_pair(kernel)
    stride = kernel if stride is None else as_pair(stride)
    padding = as_pair(padding)
    if x.shape[2] + 2 * padding[0] < kernel[0] or x.shape[3] + 2 * padding[1] < kernel[1]:
        raise DimensionError(f"pool2d: kernel {kernel} larger than input {x.shape[2:]} (+pad {padding})")
    return apply("pool2d", x, kind=kind, kernel=kernel, stride=stride, padding=padding)


def _cpool_fwd(x, kind: PoolKind):
    if kind is PoolKind.MAX:
        arg = np.argmax(x, axis=1)[:, None]
        return np.take_along_axis(x, arg, axis=1), (x.shape, arg)
    return x.mean(axis=1, keepdims=True), (x.shape, None)


def _cpool_bwd(g, saved, kind: PoolKind):
    shape, arg = saved
    if kind is PoolKind.MAX:
        gx = np.zeros(shape)
        np.put_along_axis(gx, arg, g, axis=1)
        return (gx,)
    return (np.broadcast_to(g / shape[1], shape).copy(),)


register("channel_pool", backward=_cpool_bwd, flops=lambda ins, out, kind: ins[0].size)(_cpool_fwd)


def channel_pool(x: Tensor, kind: PoolKind) -> Tensor:
    """Max or mean across the channel axis -> (N, 1, H, W)."""
    _require4(x, "channel_pool input")
    return apply("channel_pool", x, kind=kind)


# ---------------------------------------------------------------------------
# activations

def _relu_fwd(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


register("relu", backward=lambda g, mask: (g * mask,), flops=lambda ins, out: out.size)(_relu_fwd)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_fwd(x):
    y = _sigmoid(x)
    return y, y


register("sigmoid", backward=lambda g, y: (g * y * (1.0 - y),), flops=lambda ins, out: out.size)(_sigmoid_fwd)


def _softmax_fwd(x, axis: int):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return y, y


def _softmax_bwd(g, y, axis: int):
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


register("softmax", backward=_softmax_bwd, flops=lambda ins, out, axis: out.size)(_softmax_fwd)


def relu(x: Tensor) -> Tensor:
    return apply("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", x)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return apply("softmax", x, axis=axis)


def activation(x: Tensor, kind: str) -> Tensor:
    """``kind`` is one of 'relu', 'sigmoid', 'softmax' (softmax over the channel axis)."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis=1)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BNState:
    """Running statistics owned by the model; mutated only in Train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "BNState":
        return cls(np.zeros(channels), np.ones(channels), momentum)


def _bn_fwd(x, gamma, beta, state: BNState, mode: Mode, eps: float):
    shape = (1, -1, 1, 1)
    if mode is Mode.TRAIN:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        mom = state.momentum
        state.mean = (1 - mom) * state.mean + mom * mu
        unbiased = var * m / (m - 1) if m > 1 else var
        state.var = (1 - mom) * state.var + mom * unbiased
    else:
        mu, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv, gamma)


def _bn_bwd(g, saved, state, mode: Mode, eps):
    xhat, inv, gamma = saved
    shape = (1, -1, 1, 1)
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma.reshape(shape)
    if mode is Mode.TRAIN:
        m = g.shape[0] * g.shape[2] * g.shape[3]
        dx = (inv.reshape(shape) / m) * (
            m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    else:
        dx = dxhat * inv.reshape(shape)
    return dx, dgamma, dbeta


register("batchnorm2d", backward=_bn_bwd,
         flops=lambda ins, out, state, mode, eps: out.size)(_bn_fwd)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState,
                mode: Mode = Mode.TRAIN, eps: float = 1e-5) -> Tensor:
    _require4(x, "batchnorm2d input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise DimensionError(f"batchnorm2d: channel axis {c} does not match gamma {gamma.shape}/beta {beta.shape}")
    return apply("batchnorm2d", x, gamma, beta, state=state, mode=Mode(mode), eps=float(eps))


# ---------------------------------------------------------------------------
# matrices and reshaping

def _matmul_fwd(a, b):
    return np.matmul(a, b), (a, b)


def _matmul_bwd(g, saved):
    a, b = saved
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    if ga.shape != a.shape:
        ga = ga.reshape((-1,) + a.shape).sum(axis=0)
    if gb.shape != b.shape:
        gb = gb.reshape((-1,) + b.shape).sum(axis=0)
    return ga, gb


def _matmul_flops(ins, out):
    return 2 * out.size * ins[0].shape[-1]


register("matmul", backward=_matmul_bwd, flops=_matmul_flops)(_matmul_fwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes of ``a`` batch over 2-D ``b``)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ ({a.shape[:-2]} vs {b.shape[:-2]})")
    return apply("matmul", a, b)


def _reshape_fwd(x, shape):
    return x.reshape(shape), x.shape


register("reshape", backward=lambda g, orig, shape: (g.reshape(orig),))(_reshape_fwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply("reshape", x, shape=tuple(shape))


def _transpose_fwd(x, axes):
    return np.ascontiguousarray(x.transpose(axes)), None


register("transpose", backward=lambda g, _, axes: (g.transpose(np.argsort(axes)),))(_transpose_fwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return apply("transpose", x, axes=tuple(axes))


def _concat_fwd(a, b):
    return np.concatenate([a, b], axis=1), a.shape[1]


register("concat_channels", backward=lambda g, ca: (g[:, :ca], g[:, ca:]))(_concat_fwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation; ``a`` occupies the first C_a channels."""
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: batch/spatial axes differ ({a.shape} vs {b.shape})")
    return apply("concat_channels", a, b)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ wᵀ + b`` with ``w`` stored as (out_features, in_features)."""
    if w.ndim != 2:
        raise DimensionError(f"linear weight must be 2-D, got {w.shape}")
    y = matmul(x, transpose(w, (1, 0)))
    return y if b is None else _add_last(y, b)


def _add_last_fwd(x, b):
    return x + b, x.ndim


register("add_last", backward=lambda g, nd: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)),
         flops=lambda ins, out: out.size)(_add_last_fwd)


def _add_last(x: Tensor, b: Tensor) -> Tensor:
    if b.shape != (x.shape[-1],):
        raise DimensionError(f"bias {b.shape} does not match last axis of {x.shape}")
    return apply("add_last", x, b)


def _sum_fwd(x):
    return np.asarray(x.sum()), x.shape


register("sum", backward=lambda g, shape: (np.broadcast_to(g, shape).copy(),),
         flops=lambda ins, out: ins[0].size)(_sum_fwd)


def sum_all(x: Tensor) -> Tensor:
    return apply("sum", x)


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centres, edge clamped)

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale_ = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def _resize_fwd(x, size):
    ry = _interp_matrix(x.shape[2], size[0])
    rx = _interp_matrix(x.shape[3], size[1])
    out = np.einsum("ih,nchw,jw->ncij", ry, x, rx)
    return out, (ry, rx)


def _resize_bwd(g, saved, size):
    ry, rx = saved
    return (np.einsum("ih,ncij,jw->nchw", ry, g, rx),)


register("resize_bilinear", backward=_resize_bwd,
         flops=lambda ins, out, size: 4 * out.size)(_resize_fwd)


def resize_bilinear(x: Tensor, size: Tuple[int, int]) -> Tensor:
    _require4(x, "resize_bilinear input")
    return apply("resize_bilinear", x, size=as_pair(size))
