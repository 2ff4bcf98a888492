"""Module-toggle ablation: the eight rows from the dual baseline to all three modules."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, format_config
from .data import (CLEAN_STYLE, DEFAULT_STYLE, DatasetError, SamplePair, hash_split, load_png_pair_dataset,
                   synthetic_splits)
from .model import ABLATION_ROWS, build_model, count_params_flops, load_into
from .training import evaluate_map, train


def load_datasets(cfg: RunConfig) -> Tuple[List[SamplePair], List[SamplePair], List[SamplePair]]:
    """(train, val, test) for a run: the synthetic stream or a hash-split directory."""
    if cfg.data == "synthetic":
        style = replace(DEFAULT_STYLE if cfg.clutter else CLEAN_STYLE, p_misaligned=cfg.p_misaligned)
        return synthetic_splits(cfg.n_train, cfg.n_val, cfg.n_test, cfg.num_classes, cfg.input_size,
                                cfg.data_seed, cfg.alignment, style)
    samples = load_png_pair_dataset(cfg.data, cfg.input_size)
    if not samples:
        raise DatasetError(f"no samples found under {cfg.data}")
    n_cls = len(samples[0].labels)
    if n_cls != cfg.num_classes:
        raise DatasetError(f"{cfg.data} has {n_cls} label columns but num_classes={cfg.num_classes}")
    splits = hash_split(samples)
    return splits["train"], splits["val"], splits["test"]


def slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_") or "row"


@dataclass
class AblationRow:
    name: str
    toggles: Tuple[bool, bool, bool]  # (fdim, mscfe, cafm)
    flops: int
    params: int
    seeds: List[int] = field(default_factory=list)
    val_maps: List[float] = field(default_factory=list)
    test_maps: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    @property
    def val_map(self) -> float:
        return float(np.mean(self.val_maps))

    @property
    def test_map(self) -> float:
        return float(np.mean(self.test_maps))


def run_row(cfg: RunConfig, name: str, toggles, seed: int, data, out_dir: Optional[Path] = None,
            log: Optional[Callable] = None):
    """Train one toggle combination with one seed; returns (best EMA val mAP, its test mAP)."""
    tr, va, te = data
    fd, ms, ca = toggles
    run = replace(cfg, use_fdim=fd, use_mscfe=ms, use_cafm=ca, seed=seed)
    model = build_model(run.model_config())
    hist = ckpt = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved.config").write_text(format_config(run))
        hist, ckpt = out_dir / "history.csv", out_dir / "best.dvxf"
    t0 = time.perf_counter()
    res = train(model, tr, va, run.train_config(), history_path=hist, checkpoint_path=ckpt,
                log=(lambda rec: log(name, seed, rec)) if log else None)
    load_into(model, res.best_arrays, use_ema=True)
    test = evaluate_map(model, te, batch_size=run.eval_batch_size) if te else float("nan")
    return res.best_val_map, test, time.perf_counter() - t0


def run_ablation(cfg: RunConfig, rows: Sequence = ABLATION_ROWS, out_dir=None,
                 log: Optional[Callable] = None, data=None) -> List[AblationRow]:
    data = load_datasets(cfg) if data is None else data
    out: List[AblationRow] = []
    for name, toggles in rows:
        fd, ms, ca = toggles
        model = build_model(replace(cfg, use_fdim=fd, use_mscfe=ms, use_cafm=ca).model_config())
        params, flops = count_params_flops(model)
        row = AblationRow(name, tuple(toggles), flops, params)
        for seed in cfg.seeds:
            sub = None if out_dir is None else Path(out_dir) / slug(name) / f"seed{seed}"
            val, test, secs = run_row(cfg, name, toggles, seed, data, sub, log)
            row.seeds.append(seed)
            row.val_maps.append(val)
            row.test_maps.append(test)
            row.seconds.append(secs)
        out.append(row)
    return out


ABLATION_HEADER = "row\tFLOPs\tParams\tVal_mAP\tTest_mAP\tVal_mAP_per_seed\tTest_mAP_per_seed"


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [ABLATION_HEADER]
    for r in rows:
        lines.append("\t".join([
            r.name, str(r.flops), str(r.params), f"{r.val_map:.4f}", f"{r.test_map:.4f}",
            ",".join(f"{v:.4f}" for v in r.val_maps), ",".join(f"{v:.4f}" for v in r.test_maps)]))
    return "\n".join(lines) + "\n"
