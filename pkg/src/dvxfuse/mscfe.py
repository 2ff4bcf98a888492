"""Multi-scale cross-view feature enhancement.

Per stage, for the OL and SD feature maps ``F_ol``, ``F_sd`` of equal shape:

1. add a fixed 2D sinusoidal positional encoding to each view;
2. bidirectional multi-head cross-attention.  The SD branch attends with OL
   queries over SD keys/values, the OL branch with SD queries over OL keys/values;
3. residual merge after batch norm, ``F_e = BN(F_att) + F``;
4. depthwise-separable refinement of ``F_e``;
5. unless this is the last stage, a spatial attention map per view: channel max
   and channel mean maps, concatenated, 7×7 conv, sigmoid, then (optionally)
   2×2 max-pooled to the next stage's resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

import numpy as np

from . import ops
from .layers import Params, batchnorm, bn_init, conv, conv_init, dwconv, dwconv_init, linear_init, scoped
from .ops import Mode
from .tensor import ConvSpec, DimensionError, PoolKind, Tensor

SPATIAL_KERNEL = 7


@dataclass(frozen=True)
class AttentionMaps:
    s_ol: Tensor
    s_sd: Tensor


def positional_encoding_2d(shape: Tuple[int, int, int]) -> Tensor:
    """Fixed encoding of shape (1, C, H, W).

    Channels ``[0, C/2)`` encode the row index and ``[C/2, C)`` the column index.
    Within each half, channel ``2i`` is ``sin(pos·f_i)`` and ``2i+1`` is
    ``cos(pos·f_i)`` with ``f_i = 10000^(−4i/C)``.
    """
    c, h, w = shape
    if c % 4:
        raise DimensionError(f"positional encoding needs C divisible by 4, got {c}")
    quarter = c // 4
    freqs = 10000.0 ** (-4.0 * np.arange(quarter) / c)
    pe = np.zeros((c, h, w))
    rows = np.arange(h)[:, None] * freqs[None, :]  # (H, C/4)
    cols = np.arange(w)[:, None] * freqs[None, :]  # (W, C/4)
    half = c // 2
    pe[0:half:2] = np.sin(rows).T[:, :, None]
    pe[1:half:2] = np.cos(rows).T[:, :, None]
    pe[half::2] = np.sin(cols).T[:, None, :]
    pe[half + 1::2] = np.cos(cols).T[:, None, :]
    return Tensor._wrap(pe[None])


def init_cross_attention(rng: np.random.Generator, channels: int) -> Params:
    out: Params = {}
    for name in ("q", "k", "v"):
        out.update(linear_init(rng, channels, channels, bias=False, prefix=f"{name}."))
    out.update(linear_init(rng, channels, channels, prefix="o."))
    return out


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, length, c = t.shape
    return ops.transpose(ops.reshape(t, (n, length, heads, c // heads)), (0, 2, 1, 3))


def attention_weights(query_feats: Tensor, context_feats: Tensor, params: Mapping[str, Tensor],
                      heads: int) -> Tensor:
    """Row-stochastic attention matrix, shape (N, heads, Lq, Lk)."""
    c = query_feats.shape[1]
    q = _split_heads(ops.linear(_tokens(query_feats), params["q.weight"]), heads)
    k = _split_heads(ops.linear(_tokens(context_feats), params["k.weight"]), heads)
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
    return ops.softmax(ops.scale(scores, 1.0 / math.sqrt(c // heads)), axis=-1)


def cross_attention(query_feats: Tensor, context_feats: Tensor, params: Mapping[str, Tensor],
                    heads: int = 4) -> Tensor:
    """Multi-head scaled dot-product attention of query positions over context positions.

    Output has the query's (N, C, H_q, W_q) shape.
    """
    for name, t in (("query", query_feats), ("context", context_feats)):
        if t.ndim != 4:
            raise DimensionError(f"cross_attention: {name} must be (N, C, H, W), got {t.shape}")
    n, c, hq, wq = query_feats.shape
    if context_feats.shape[1] != c or context_feats.shape[0] != n:
        raise DimensionError(f"cross_attention: context {context_feats.shape} vs query {query_feats.shape}")
    if params["q.weight"].shape != (c, c):
        raise DimensionError(f"cross_attention: projections are {params['q.weight'].shape}, features have C={c}")
    if c % heads:
        raise DimensionError(f"cross_attention: C={c} not divisible by {heads} heads")
    attn = attention_weights(query_feats, context_feats, params, heads)
    v = _split_heads(ops.linear(_tokens(context_feats), params["v.weight"]), heads)
    o = ops.matmul(attn, v)  # (N, h, Lq, d)
    o = ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (n, hq * wq, c))
    o = ops.linear(o, params["o.weight"], params["o.bias"])
    return ops.reshape(ops.transpose(o, (0, 2, 1)), (n, c, hq, wq))


def init_mscfe(rng: np.random.Generator, channels: int, is_last_stage: bool = False) -> Params:
    out: Params = {}
    for view in ("ol", "sd"):
        block: Params = {}
        block.update({f"attn.{k}": v for k, v in init_cross_attention(rng, channels).items()})
        block.update(bn_init(channels, "bn."))
        block.update({f"dwconv.{k}": v for k, v in dwconv_init(rng, channels, channels).items()})
        if not is_last_stage:
            block.update(conv_init(rng, ConvSpec.square(2, 1, SPATIAL_KERNEL), prefix="conv7."))
        out.update({f"{view}.{k}": v for k, v in block.items()})
    return out


def spatial_attention_map(features: Tensor, p: Mapping[str, Tensor], downsample: bool) -> Tensor:
    pooled = ops.concat_channels(ops.channel_pool(features, PoolKind.MAX),
                                 ops.channel_pool(features, PoolKind.AVG))
    s = ops.sigmoid(conv(pooled, p, ConvSpec.square(2, 1, SPATIAL_KERNEL), "conv7."))
    if downsample:
        s = ops.pool2d(s, PoolKind.MAX, kernel=2, stride=2)
    return s


def mscfe_forward(f_ol: Tensor, f_sd: Tensor, params: Mapping[str, Tensor], bn,
                  mode: Mode = Mode.TRAIN, heads: int = 4, is_last_stage: bool = False,
                  downsample_maps: bool = True, eps: float = 1e-5
                  ) -> Tuple[Tensor, Tensor, Optional[AttentionMaps]]:
    """Run one MSCFE block; ``bn`` provides the per-view BatchNorm running states."""
    if f_ol.ndim != 4 or f_sd.ndim != 4:
        raise DimensionError(f"mscfe_forward: inputs must be (N, C, H, W), got {f_ol.shape}, {f_sd.shape}")
    if f_ol.shape[1] != f_sd.shape[1]:
        raise DimensionError(f"mscfe_forward: channel axis differs ({f_ol.shape[1]} vs {f_sd.shape[1]})")
    if f_ol.shape != f_sd.shape:
        raise DimensionError(f"mscfe_forward: views must share (N, C, H, W) for the residual merge, "
                             f"got {f_ol.shape} and {f_sd.shape}")
    c, h, w = f_ol.shape[1:]
    pe = positional_encoding_2d((c, h, w))
    p_ol, p_sd = scoped(params, "ol"), scoped(params, "sd")
    fp_ol, fp_sd = ops.add(f_ol, pe), ops.add(f_sd, pe)

    att_sd = cross_attention(fp_ol, fp_sd, scoped(p_sd, "attn"), heads)
    att_ol = cross_attention(fp_sd, fp_ol, scoped(p_ol, "attn"), heads)

    bn_ol = bn.get_state("ol.bn", c)
    bn_sd = bn.get_state("sd.bn", c)
    fe_ol = ops.add(batchnorm(att_ol, p_ol, bn_ol, mode, "bn.", eps), f_ol)
    fe_sd = ops.add(batchnorm(att_sd, p_sd, bn_sd, mode, "bn.", eps), f_sd)

    fc_ol = dwconv(fe_ol, scoped(p_ol, "dwconv"))
    fc_sd = dwconv(fe_sd, scoped(p_sd, "dwconv"))
    if is_last_stage:
        return fc_ol, fc_sd, None
    maps = AttentionMaps(spatial_attention_map(fc_ol, p_ol, downsample_maps),
                         spatial_attention_map(fc_sd, p_sd, downsample_maps))
    return fc_ol, fc_sd, maps
