"""Dual-view classifier: shared staged backbone plus FDIM / MSCFE / CAFM.

Layout for the default 64×64 input and widths (16, 32, 64, 128)::

    stem   conv3×3/2 -> 32×32
    stage1 -> 16×16   FDIM on (OL, SD)          [use_fdim]
    stage2 -> 8×8     MSCFE, maps -> 4×4         [use_mscfe]
    stage3 -> 4×4     gated by stage-2 maps, MSCFE, maps -> 2×2
    stage4 -> 2×2     gated by stage-3 maps, MSCFE (last, no maps)
    fusion            CAFM -> Conv1(C->C)        [use_cafm]
                      or concat -> Conv1(2C->C)  (dual baseline)
    head              global average pool -> linear -> logits

Backbone parameters are a single set applied to both views.  Each stage opens
with a stride-2 conv-BN-ReLU block; attention maps from the previous MSCFE gate
the output of that block (where resolutions match) before the remaining blocks.

FLOP convention used by :func:`count_params_flops` (batch of one pair):
convolutions and matmuls count 2 per multiply-add plus 1 per bias add; batch
norm, activations, softmax, elementwise add/mul/scale count 1 per output element;
pooling counts the window elements read; an H×W FFT counts round(5·HW·log2 HW)
per channel; reshapes, transposes and concatenations are free.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import ops
from .autodiff import FlopCounter
from .cafm import cafm_forward, init_cafm, resize_to_match
from .fdim import fdim_forward, init_fdim
from .layers import BNBank, Params, as_tensors, batchnorm, bn_init, conv, conv_init, linear_init, scoped
from .mscfe import mscfe_forward, init_mscfe
from .ops import BNState, Mode
from .tensor import ConvSpec, DimensionError, PoolKind, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    input_size: Tuple[int, int] = (64, 64)
    in_channels: int = 1
    num_classes: int = 15
    heads: int = 4
    fdim_reduction: int = 4
    cbam_reduction: int = 16
    fdim_cross_conditioning: bool = False
    use_fdim: bool = True
    use_mscfe: bool = True
    use_cafm: bool = True
    mscfe_after_stage1: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if len(self.widths) != 4 or len(self.depths) != 4:
            raise ConfigError(f"need exactly 4 stages, got widths={self.widths} depths={self.depths}")
        for w in self.widths:
            if w < 4 or w % 4:
                raise ConfigError(f"stage width {w} must be >= 4 and divisible by 4")
            if self.use_mscfe and w % self.heads:
                raise ConfigError(f"stage width {w} not divisible by heads={self.heads}")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"stage depths must be >= 1, got {self.depths}")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ConfigError(f"input size {h}x{w} must be divisible by 32 (five stride-2 stages)")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if self.use_fdim and self.widths[0] // self.fdim_reduction < 1:
            raise ConfigError(f"fdim_reduction {self.fdim_reduction} too large for width {self.widths[0]}")
        if self.use_cafm and self.widths[-1] // self.cbam_reduction < 1:
            raise ConfigError(f"cbam_reduction {self.cbam_reduction} too large for width {self.widths[-1]}")
        return self

    @property
    def mscfe_stages(self) -> Tuple[int, ...]:
        if not self.use_mscfe:
            return ()
        return (1, 2, 3, 4) if self.mscfe_after_stage1 else (2, 3, 4)

    def with_toggles(self, fdim: bool, mscfe: bool, cafm: bool) -> "ModelConfig":
        return replace(self, use_fdim=fdim, use_mscfe=mscfe, use_cafm=cafm)


# ablation rows in reporting order
ABLATION_ROWS = (
    ("dual baseline", (False, False, False)),
    ("+CAFM", (False, False, True)),
    ("+MSCFE", (False, True, False)),
    ("+FDIM", (True, False, False)),
    ("+MSCFE & FDIM", (True, True, False)),
    ("+CAFM & MSCFE", (False, True, True)),
    ("+CAFM & FDIM", (True, False, True)),
    ("+ALL", (True, True, True)),
)


def _block_spec(cin: int, cout: int, stride: int) -> ConvSpec:
    return ConvSpec.square(cin, cout, 3, stride)


def _stage_blocks(cfg: ModelConfig, k: int):
    """(name, ConvSpec) for each conv-BN-ReLU block of stage k (1-based)."""
    cin = cfg.widths[0] if k == 1 else cfg.widths[k - 2]
    cout = cfg.widths[k - 1]
    out = [(f"stage{k}.block0", _block_spec(cin, cout, 2))]
    for j in range(1, cfg.depths[k - 1]):
        out.append((f"stage{k}.block{j}", _block_spec(cout, cout, 1)))
    return out


class Model:
    """Parameters, BatchNorm running statistics and the architecture they feed."""

    def __init__(self, config: ModelConfig, params: Params, bn: BNBank):
        self.config = config
        self.params = params
        self.bn = bn

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        for name, st in sorted(self.bn.items()):
            out[f"buffer/{name}.running_mean"] = st.mean
            out[f"buffer/{name}.running_var"] = st.var
        return out

    def copy(self) -> "Model":
        bn = BNBank(self.bn.momentum)
        for k, st in self.bn.items():
            bn[k] = BNState(st.mean.copy(), st.var.copy(), st.momentum)
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, bn)


def build_model(config: ModelConfig) -> Model:
    cfg = config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1417]))  # "init" stream
    p: Params = {}
    bn = BNBank(cfg.bn_momentum)

    def add_block(name: str, spec: ConvSpec):
        p.update(conv_init(rng, spec, bias=False, prefix=f"backbone.{name}.conv."))
        p.update(bn_init(spec.out_channels, f"backbone.{name}.bn."))
        bn.get_state(f"backbone.{name}.bn", spec.out_channels)

    add_block("stem", _block_spec(cfg.in_channels, cfg.widths[0], 2))
    for k in range(1, 5):
        for name, spec in _stage_blocks(cfg, k):
            add_block(name, spec)
    if cfg.use_fdim:
        p.update({f"fdim.{k}": v for k, v in init_fdim(rng, cfg.widths[0], cfg.fdim_reduction).items()})
    for k in cfg.mscfe_stages:
        block = init_mscfe(rng, cfg.widths[k - 1], is_last_stage=(k == 4))
        p.update({f"mscfe{k}.{n}": v for n, v in block.items()})
    c = cfg.widths[-1]
    if cfg.use_cafm:
        p.update({f"cafm.{k}": v for k, v in init_cafm(rng, c, cfg.cbam_reduction).items()})
        p.update(conv_init(rng, ConvSpec.pointwise(c, c), prefix="head.conv1."))
    else:
        p.update(conv_init(rng, ConvSpec.pointwise(2 * c, c), prefix="head.conv1."))
    p.update(linear_init(rng, cfg.num_classes, c, prefix="head.fc."))
    model = Model(cfg, p, bn)
    # one Eval pass registers the lazily created module BN states (Eval does not mutate them)
    zeros = Tensor._wrap(np.zeros((1, cfg.in_channels, *cfg.input_size)))
    forward_pair(model, zeros, zeros, Mode.EVAL)
    return model


def _cbr(x: Tensor, p: Mapping[str, Tensor], bn: BNBank, name: str, spec: ConvSpec,
         mode: Mode, eps: float) -> Tensor:
    h = conv(x, p, spec, f"backbone.{name}.conv.")
    h = batchnorm(h, p, bn.get_state(f"backbone.{name}.bn", spec.out_channels), mode,
                  f"backbone.{name}.bn.", eps)
    return ops.relu(h)


def _stage(x: Tensor, k: int, cfg: ModelConfig, p, bn, mode, gate: Optional[Tensor]) -> Tensor:
    for j, (name, spec) in enumerate(_stage_blocks(cfg, k)):
        x = _cbr(x, p, bn, name, spec, mode, cfg.bn_eps)
        if j == 0 and gate is not None:
            x = ops.mul(x, gate)
    return x


def forward_pair(model: Model, ol: Tensor, sd: Tensor, mode: Mode = Mode.EVAL,
                 params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """Logits (N, num_classes) for a batch of OL/SD image pairs.

    ``params`` overrides the model's own parameters (used when taping gradients).
    """
    cfg = model.config
    mode = Mode(mode)
    expected = (cfg.in_channels, *cfg.input_size)
    for name, t in (("ol", ol), ("sd", sd)):
        if t.ndim != 4 or t.shape[1:] != expected:
            raise DimensionError(f"forward_pair: {name} has shape {t.shape}, expected (N, {expected})")
    if ol.shape[0] != sd.shape[0]:
        raise DimensionError(f"forward_pair: batch sizes differ ({ol.shape[0]} vs {sd.shape[0]})")
    p = as_tensors(model.params) if params is None else params
    bn = model.bn
    eps = cfg.bn_eps

    stem = _block_spec(cfg.in_channels, cfg.widths[0], 2)
    x_ol = _cbr(ol, p, bn, "stem", stem, mode, eps)
    x_sd = _cbr(sd, p, bn, "stem", stem, mode, eps)

    gate_ol = gate_sd = None
    for k in range(1, 5):
        x_ol = _stage(x_ol, k, cfg, p, bn, mode, gate_ol)
        x_sd = _stage(x_sd, k, cfg, p, bn, mode, gate_sd)
        gate_ol = gate_sd = None
        if k == 1 and cfg.use_fdim:
            x_ol, x_sd = fdim_forward(x_ol, x_sd, scoped(p, "fdim"), cfg.fdim_cross_conditioning)
        if k in cfg.mscfe_stages:
            x_ol, x_sd, maps = mscfe_forward(
                x_ol, x_sd, scoped(p, f"mscfe{k}"), bn.scoped(f"mscfe{k}"), mode,
                heads=cfg.heads, is_last_stage=(k == 4), downsample_maps=True, eps=eps)
            if maps is not None:
                gate_ol, gate_sd = maps.s_ol, maps.s_sd

    c = cfg.widths[-1]
    if cfg.use_cafm:
        x_sd = resize_to_match(x_sd, x_ol)
        fused = cafm_forward(x_ol, x_sd, scoped(p, "cafm"), bn.scoped("cafm"), mode, eps)
        fused = conv(fused, p, ConvSpec.pointwise(c, c), "head.conv1.")
    else:
        fused = conv(ops.concat_channels(x_ol, x_sd), p, ConvSpec.pointwise(2 * c, c), "head.conv1.")
    n = fused.shape[0]
    pooled = ops.reshape(ops.pool2d(fused, PoolKind.AVG, global_pool=True), (n, c))
    return ops.linear(pooled, p["head.fc.weight"], p["head.fc.bias"])


def count_params(model: Model) -> int:
    return int(sum(v.size for v in model.params.values()))


def count_params_flops(model: Model, input_size: Optional[Tuple[int, int]] = None) -> Tuple[int, int]:
    """(learnable scalars, FLOPs of one Eval-mode pair forward) under the module convention."""
    m = model
    if input_size is not None and tuple(input_size) != tuple(model.config.input_size):
        m = Model(replace(model.config, input_size=tuple(input_size)).validate(), model.params, model.bn)
    shape = (1, m.config.in_channels, *m.config.input_size)
    zeros = Tensor._wrap(np.zeros(shape))
    with FlopCounter() as fc:
        forward_pair(m, zeros, zeros, Mode.EVAL)
    return count_params(model), fc.total


def flop_breakdown(model: Model) -> Dict[str, int]:
    shape = (1, model.config.in_channels, *model.config.input_size)
    zeros = Tensor._wrap(np.zeros(shape))
    with FlopCounter() as fc:
        forward_pair(model, zeros, zeros, Mode.EVAL)
    return dict(fc.by_op)


# ---------------------------------------------------------------------------
# checkpoint format: all integers are little-endian uint32
#   b"DVXF" | version | record count |
#   per record: name length | name (utf-8) | rank | dims... | float32 LE payload

MAGIC = b"DVXF"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(dims)
        off += 4 * n
        out[name] = arr
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out


def model_arrays(model: Model, ema: Optional[Mapping[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    out = model.state_arrays()
    if ema is not None:
        out.update({f"ema/{k}": v for k, v in ema.items()})
    return out


def save_model(path, model: Model, ema: Optional[Mapping[str, np.ndarray]] = None) -> None:
    save_checkpoint(path, model_arrays(model, ema))


def load_into(model: Model, arrays: Mapping[str, np.ndarray], use_ema: bool = False) -> Model:
    """Copy checkpoint arrays into ``model`` (optionally taking the EMA shadow as weights)."""
    missing = [k for k in model.params if f"param/{k}" not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    src = "ema/" if use_ema and any(k.startswith("ema/") for k in arrays) else "param/"
    for k in model.params:
        arr = arrays[f"{src}{k}"]
        if arr.shape != model.params[k].shape:
            raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {model.params[k].shape}")
        model.params[k] = np.array(arr, dtype=np.float64)
    for name, st in model.bn.items():
        st.mean = np.array(arrays[f"buffer/{name}.running_mean"], dtype=np.float64)
        st.var = np.array(arrays[f"buffer/{name}.running_var"], dtype=np.float64)
    return model
