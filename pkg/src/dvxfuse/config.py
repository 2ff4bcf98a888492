"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Tuples are comma separated
(``widths = 16,32,64,128``), booleans accept true/false/yes/no/1/0.  Unknown
keys are rejected; omitted keys keep their defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import List, Tuple

from .model import ConfigError, ModelConfig
from .training import TrainConfig


class ConfigParseError(ConfigError):
    def __init__(self, path: str, problems: List[str]):
        self.path, self.problems = path, problems
        super().__init__("\n".join(f"{path}:{p}" for p in problems))


@dataclass(frozen=True)
class RunConfig:
    # model
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    input_size: Tuple[int, int] = (64, 64)
    in_channels: int = 1
    num_classes: int = 6
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
    # optimisation
    batch_size: int = 32
    epochs: int = 40
    base_lr: float = 1e-3
    warmup_epochs: int = 5
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    eval_batch_size: int = 100
    # data: "synthetic" or a directory in the images/ + labels.csv layout
    data: str = "synthetic"
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    data_seed: int = 1234
    alignment: str = "presence"
    clutter: bool = True  # strokes, distractor glyphs and noise
    p_misaligned: float = 0.5  # share of negatives drawn as misaligned pairs ("object" only)
    # run
    seed: int = 0
    ablation_seeds: Tuple[int, ...] = ()
    out_dir: str = "runs/default"

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names}).validate()

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self) -> "RunConfig":
        self.model_config()
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} must lie in [0, epochs={self.epochs})")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay={self.ema_decay} must lie in [0, 1)")
        if self.data == "synthetic":
            if self.num_classes > 8:
                raise ConfigError("the synthetic benchmark supports at most 8 classes")
            if self.in_channels != 1:
                raise ConfigError("the synthetic benchmark is single-channel")
            if self.alignment not in ("object", "presence"):
                raise ConfigError(f"alignment must be 'object' or 'presence', got {self.alignment!r}")
            if not 0.0 <= self.p_misaligned <= 1.0:
                raise ConfigError(f"p_misaligned={self.p_misaligned} must lie in [0, 1]")
        return self

    @property
    def seeds(self) -> Tuple[int, ...]:
        return self.ablation_seeds or (self.seed,)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _convert(name: str, raw: str):
    default = getattr(_DEFAULTS, name)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.replace("x", ",").split(",") if p.strip()]
        vals = tuple(int(p) for p in parts)
        if name == "input_size" and len(vals) == 1:
            vals = vals * 2
        return vals
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, path: str = "<config>") -> RunConfig:
    values, problems = {}, []
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            problems.append(f"{line_no}: expected 'key = value', got {body!r}")
            continue
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELDS:
            problems.append(f"{line_no}: unknown key {key!r}")
            continue
        if key in values:
            problems.append(f"{line_no}: duplicate key {key!r}")
            continue
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            problems.append(f"{line_no}: bad value for {key!r}: {exc}")
    if problems:
        raise ConfigParseError(path, problems)
    cfg = replace(_DEFAULTS, **values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigParseError(path, [f" {exc}"]) from None


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigParseError(str(p), [f" cannot read config ({exc.strerror})"]) from None
    return parse_config_text(text, str(p))


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def format_config(cfg: RunConfig) -> str:
    """Every key with its resolved value; parsing the output reproduces ``cfg``."""
    return "".join(f"{f.name} = {_render(getattr(cfg, f.name))}\n" for f in fields(RunConfig))
