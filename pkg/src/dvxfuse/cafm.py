"""Convolutional attention fusion of the final OL/SD feature maps.

``F_final = ReLU(dwcsp(BN(concat(CBAM_ol(F_ol), CBAM_sd(F_sd)))))`` where
``dwcsp(F) = Conv1(F) + DWConv(F)``.

Both dwcsp branches must land on C channels for the sum, so the depthwise branch
is a full depthwise-separable unit: 3×3 depthwise over 2C channels followed by a
2C→C pointwise conv.  A bare depthwise conv would keep 2C channels.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import ops
from .layers import Params, batchnorm, bn_init, conv, conv_init, dwconv, dwconv_init, mlp, mlp_init, scoped
from .ops import Mode
from .tensor import ConvSpec, DimensionError, PoolKind, Tensor

SPATIAL_KERNEL = 7


def init_cbam(rng: np.random.Generator, channels: int, reduction: int = 16) -> Params:
    hidden = channels // reduction
    if hidden < 1:
        raise DimensionError(f"CBAM reduction {reduction} leaves no hidden units for {channels} channels")
    return {
        **{f"mlp.{k}": v for k, v in mlp_init(rng, channels, hidden).items()},
        **conv_init(rng, ConvSpec.square(2, 1, SPATIAL_KERNEL), prefix="conv7."),
    }


def channel_gate(f: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Sigmoid(MLP(avg) + MLP(max)) as an (N, C, 1, 1) gate; the MLP is shared."""
    n, c = f.shape[:2]
    avg = ops.reshape(ops.pool2d(f, PoolKind.AVG, global_pool=True), (n, c))
    mx = ops.reshape(ops.pool2d(f, PoolKind.MAX, global_pool=True), (n, c))
    m = scoped(p, "mlp")
    logits = ops.add(ops.reshape(mlp(avg, m), (n, c, 1, 1)), ops.reshape(mlp(mx, m), (n, c, 1, 1)))
    return ops.sigmoid(logits)


def spatial_gate(f: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    pooled = ops.concat_channels(ops.channel_pool(f, PoolKind.AVG), ops.channel_pool(f, PoolKind.MAX))
    return ops.sigmoid(conv(pooled, p, ConvSpec.square(2, 1, SPATIAL_KERNEL), "conv7."))


def cbam_forward(f: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Channel gate then spatial gate."""
    if f.ndim != 4:
        raise DimensionError(f"cbam_forward: expected (N, C, H, W), got {f.shape}")
    if params["mlp.fc1.weight"].shape[1] != f.shape[1]:
        raise DimensionError(f"cbam_forward: channel axis {f.shape[1]} does not match "
                             f"CBAM width {params['mlp.fc1.weight'].shape[1]}")
    f = ops.mul(f, channel_gate(f, params))
    return ops.mul(f, spatial_gate(f, params))


def init_dwcsp(rng: np.random.Generator, channels: int) -> Params:
    """Parameters for a 2C -> C dwcsp layer."""
    return {
        **conv_init(rng, ConvSpec.pointwise(2 * channels, channels), prefix="conv1."),
        **{f"dwconv.{k}": v for k, v in dwconv_init(rng, 2 * channels, channels).items()},
    }


def dwcsplayer_forward(f_bn: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    c2 = f_bn.shape[1]
    c = params["conv1.weight"].shape[0]
    if c2 != params["conv1.weight"].shape[1]:
        raise DimensionError(f"dwcsplayer: input has {c2} channels, expected {params['conv1.weight'].shape[1]}")
    x2 = conv(f_bn, params, ConvSpec.pointwise(c2, c), "conv1.")
    x1 = dwconv(f_bn, scoped(params, "dwconv"), c_out=c)
    return ops.add(x1, x2)


def init_cafm(rng: np.random.Generator, channels: int, cbam_reduction: int = 16) -> Params:
    return {
        **{f"cbam_ol.{k}": v for k, v in init_cbam(rng, channels, cbam_reduction).items()},
        **{f"cbam_sd.{k}": v for k, v in init_cbam(rng, channels, cbam_reduction).items()},
        **bn_init(2 * channels, "bn."),
        **{f"dwcsp.{k}": v for k, v in init_dwcsp(rng, channels).items()},
    }


def cafm_forward(f_ol: Tensor, f_sd: Tensor, params: Mapping[str, Tensor], bn,
                 mode: Mode = Mode.TRAIN, eps: float = 1e-5) -> Tensor:
    """Fuse two (N, C, H, W) views into one non-negative (N, C, H, W) map."""
    if f_ol.ndim != 4 or f_sd.ndim != 4 or f_ol.shape[:2] != f_sd.shape[:2]:
        raise DimensionError(f"cafm_forward: views must share (N, C), got {f_ol.shape} and {f_sd.shape}")
    if f_ol.shape[2:] != f_sd.shape[2:]:
        raise DimensionError(
            f"cafm_forward: spatial sizes differ ({f_ol.shape[2:]} vs {f_sd.shape[2:]}); "
            "resize the SD features to the OL size first (see resize_to_match)")
    r_ol = cbam_forward(f_ol, scoped(params, "cbam_ol"))
    r_sd = cbam_forward(f_sd, scoped(params, "cbam_sd"))
    cat = ops.concat_channels(r_ol, r_sd)
    f_bn = batchnorm(cat, params, bn.get_state("bn", cat.shape[1]), mode, "bn.", eps)
    return ops.relu(dwcsplayer_forward(f_bn, scoped(params, "dwcsp")))


def resize_to_match(f_sd: Tensor, f_ol: Tensor) -> Tensor:
    """Bilinearly resize the SD features to the OL spatial size when they differ."""
    if f_sd.shape[2:] == f_ol.shape[2:]:
        return f_sd
    return ops.resize_bilinear(f_sd, f_ol.shape[2:])
