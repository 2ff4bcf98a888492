"""Ranking metrics for multi-label classification."""

from __future__ import annotations

from typing import List, Optional

import numpy as np


class MetricError(ValueError):
    pass


def _check_binary(truths: np.ndarray) -> None:
    if not np.all((truths == 0) | (truths == 1)):
        raise MetricError("truths must be binary (0/1)")


def average_precision(scores, truths) -> Optional[float]:
    """Discrete AP: mean precision at the rank of each positive.

    Scores are ranked descending with ties broken by original index, so the
    result is reproducible.  Returns ``None`` when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truths).ravel()
    if s.shape != t.shape:
        raise MetricError(f"scores {s.shape} and truths {t.shape} differ in length")
    _check_binary(t)
    n_pos = int(t.sum())
    if n_pos == 0:
        return None
    order = np.lexsort((np.arange(s.size), -s))
    hits = t[order].astype(bool)
    cum = np.cumsum(hits)
    ranks = np.arange(1, s.size + 1)
    return float(np.sum(cum[hits] / ranks[hits]) / n_pos)


def per_class_ap(scores, truths) -> List[Optional[float]]:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths)
    if s.ndim != 2 or s.shape != t.shape:
        raise MetricError(f"expected matching (M, C) matrices, got {s.shape} and {t.shape}")
    return [average_precision(s[:, c], t[:, c]) for c in range(s.shape[1])]


def mean_ap(scores, truths) -> float:
    """Mean of the defined per-class APs; classes without positives are skipped."""
    aps = [a for a in per_class_ap(scores, truths) if a is not None]
    if not aps:
        raise MetricError("no class has a positive example; mAP is undefined")
    return float(np.mean(aps))
