"""Pseudo-label quality scores, pool-wise fusion and top-N% selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import geometry
from .model import softmax

log = logging.getLogger(__name__)

METRICS = ("faithfulness", "robustness", "confidence")
METRIC_CODES = {"f": "faithfulness", "r": "robustness", "c": "confidence"}


@dataclass(frozen=True)
class ScoreTriple:
    faithfulness: float
    robustness: float
    confidence: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.faithfulness, self.robustness, self.confidence)


@dataclass(frozen=True, eq=False)
class PseudoLabel:
    sample_id: int
    box: np.ndarray
    qbox: np.ndarray
    scores: ScoreTriple
    i_act: float = float("nan")
    degenerate: bool = False
    selected: bool = False


def robustness(reg_box: np.ndarray, quant_box: np.ndarray) -> np.ndarray:
    """GIoU between the regression box and the dequantized classification box."""
    return geometry.giou(geometry.to_corners(reg_box), geometry.to_corners(quant_box))


def confidence(quant_logits: np.ndarray, combine: str = "product") -> np.ndarray:
    """Combine the top softmax probability of the x and y coordinate rows.

    ``quant_logits`` is ``(..., 4, n_bins)`` with rows ordered (x, y, w, h).
    ``combine`` is ``"product"`` or ``"sum"`` (the mean of the two maxima).
    """
    probs = softmax(np.asarray(quant_logits, dtype=np.float64))
    top = probs.max(axis=-1)
    px, py = top[..., 0], top[..., 1]
    if combine == "product":
        return px * py
    if combine == "sum":
        return 0.5 * (px + py)
    raise ValueError(f"unknown confidence combine mode {combine!r}")


def minmax_normalize(values: Sequence[float]) -> np.ndarray:
    """Pool-wise min-max scaling; an all-equal pool maps to 1.0 everywhere."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty pool")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def parse_metric_subset(subset: str | Sequence[str]) -> tuple[str, ...]:
    """Accept ``"frc"``-style codes or full metric names; returns canonical order."""
    if isinstance(subset, str):
        names = {METRIC_CODES[c] for c in subset.lower() if c in METRIC_CODES}
        if len(names) != len(set(subset.lower())):
            raise ValueError(f"bad metric subset {subset!r}; use letters from 'frc'")
    else:
        names = set(subset)
        bad = names - set(METRICS)
        if bad:
            raise ValueError(f"unknown metrics {sorted(bad)}")
    return tuple(m for m in METRICS if m in names)


def fuse(triples: Sequence[ScoreTriple], metrics: Sequence[str] = METRICS) -> np.ndarray:
    """Product of the pool-normalized chosen metrics.

    With an empty ``metrics`` every element scores 1.0.
    """
    if len(triples) == 0:
        raise ValueError("cannot fuse an empty pool")
    out = np.ones(len(triples))
    for name in metrics:
        out *= minmax_normalize([getattr(t, name) for t in triples])
    return out


def with_fused_scores(pool: Sequence[PseudoLabel], metrics: Sequence[str] = METRICS) -> list[PseudoLabel]:
    fused = fuse([p.scores for p in pool], metrics)
    return [replace(p, i_act=float(s)) for p, s in zip(pool, fused)]


def budget(n_percent: float, base: int) -> int:
    if not 0.0 < n_percent <= 100.0:
        raise ValueError(f"n_percent must be in (0, 100], got {n_percent}")
    return int(np.floor(n_percent / 100.0 * base + 0.5))


def rank_order(keys: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices sorted by descending key, ties broken by ascending id."""
    return np.lexsort((np.asarray(ids), -np.asarray(keys, dtype=np.float64)))


def sample_top(pool: Sequence[PseudoLabel], n_percent: float, base: int) -> list[PseudoLabel]:
    """Top ``round(n_percent / 100 * base)`` pseudo labels by ``i_act``.

    Ties go to the lower ``sample_id``. Output is sorted by descending score
    and marked ``selected``.
    """
    k = budget(n_percent, base)
    if k > len(pool):
        log.warning("selection budget %d exceeds pool size %d; taking the whole pool", k, len(pool))
        k = len(pool)
    if not pool:
        return []
    keys = np.array([p.i_act for p in pool])
    ids = np.array([p.sample_id for p in pool])
    order = rank_order(keys, ids)[:k]
    return [replace(pool[i], selected=True) for i in order]
