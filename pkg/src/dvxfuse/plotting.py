"""Report figures written next to the CSV/TSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_history(records: Sequence, path) -> Path:
    """Train loss and val mAP (raw and EMA) against epoch."""
    epochs = [r.epoch for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r.train_loss for r in records], marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.set_yscale("log")
    ax2.plot(epochs, [r.val_map_raw for r in records], label="raw", marker="o", ms=3)
    ax2.plot(epochs, [r.val_map_ema for r in records], label="EMA", marker="s", ms=3)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val mAP")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_ablation(rows: Sequence, path) -> Path:
    """Mean test mAP per ablation row with per-seed points; params on a twin axis."""
    names = [r.name for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.bar(xs, [r.test_map for r in rows], color="#8aa9c9")
    for i, r in enumerate(rows):
        ax.scatter([i] * len(r.test_maps), r.test_maps, color="k", s=10, zorder=3)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("test mAP (mean over seeds)")
    lo = min(min(r.test_maps) for r in rows)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    tw = ax.twinx()
    tw.plot(list(xs), [r.params / 1e3 for r in rows], color="#c0504d", marker="d")
    tw.set_ylabel("params (k)", color="#c0504d")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
