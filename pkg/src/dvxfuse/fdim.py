"""Frequency-domain interaction: per-view dynamic spectral filtering with a residual merge.

For each view, a channel descriptor (global average pool) passes through a small
MLP and a softmax over channels, giving one real weight per channel.  The view's
2D spectrum is scaled channel-wise by those weights, transformed back and added to
the input::

    x' = ifft2(fft2(x) * softmax(mlp_x(avgpool(x)))) + x

With ``cross_conditioning`` the pooled descriptors are swapped between views, so
the OL weights are driven by the SD features and vice versa.
"""

from __future__ import annotations

from typing import Mapping, Optional, Tuple

import numpy as np

from . import ops
from .layers import Params, mlp, mlp_init, scoped
from .spectral import fft2, ifft2, spectral_scale
from .tensor import DimensionError, PoolKind, Tensor

VIEWS = ("ol", "sd")


def init_fdim(rng: np.random.Generator, channels: int, reduction: int = 4) -> Params:
    hidden = channels // reduction
    if hidden < 1:
        raise DimensionError(f"FDIM reduction {reduction} leaves no hidden units for {channels} channels")
    out: Params = {}
    for view in VIEWS:
        out.update({f"{view}.{k}": v for k, v in mlp_init(rng, channels, hidden).items()})
    return out


def channel_descriptor(features: Tensor) -> Tensor:
    n, c = features.shape[:2]
    return ops.reshape(ops.pool2d(features, PoolKind.AVG, global_pool=True), (n, c))


def compute_filter_weights(features: Tensor, branch: Mapping[str, Tensor],
                           descriptor: Optional[Tensor] = None) -> Tensor:
    """Softmax-normalised per-channel filter weights, shape (N, C), rows sum to 1."""
    if descriptor is None:
        descriptor = channel_descriptor(features)
    if branch["fc1.weight"].shape[1] != descriptor.shape[1]:
        raise DimensionError(
            f"FDIM branch expects {branch['fc1.weight'].shape[1]} channels, got {descriptor.shape[1]}")
    return ops.softmax(mlp(descriptor, branch), axis=1)


def filter_view(x: Tensor, weights: Tensor) -> Tensor:
    return ops.add(ifft2(spectral_scale(fft2(x), weights)), x)


def fdim_forward(x: Tensor, y: Tensor, params: Mapping[str, Tensor],
                 cross_conditioning: bool = False) -> Tuple[Tensor, Tensor]:
    """Filter the OL features ``x`` and SD features ``y``; shapes are preserved."""
    for name, t in (("x", x), ("y", y)):
        if t.ndim != 4:
            raise DimensionError(f"fdim_forward: {name} must be (N, C, H, W), got {t.shape}")
    rx, ry = channel_descriptor(x), channel_descriptor(y)
    if cross_conditioning:
        rx, ry = ry, rx
    wx = compute_filter_weights(x, scoped(params, "ol"), rx)
    wy = compute_filter_weights(y, scoped(params, "sd"), ry)
    return filter_view(x, wx), filter_view(y, wy)
