"""Accuracy, pseudo-label quality curves, metric ablations and report files.

Quality-curve CSV schema (one row per ranker and threshold)::

    ranker,threshold,n_selected,accuracy

Ablation CSV schema (one row per metric subset)::

    subset,selected,precision,eval_acc,eval_acc_quant

``subset`` uses the letter codes ``f``/``r``/``c``; the random control is
written as ``none``. Floats are written with ``repr`` so a file re-parses to
the identical report.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import curation, geometry, trainer
from .config import TrainConfig, stream
from .curation import PseudoLabel
from .synthdata import GoldView, Sample

log = logging.getLogger(__name__)

THRESHOLDS = (50, 40, 30, 20, 10)
RANKERS = ("random", "robustness", "confidence", "faithfulness", "fused")
CURVE_FIELDS = ("ranker", "threshold", "n_selected", "accuracy")
ABLATION_FIELDS = ("subset", "selected", "precision", "eval_acc", "eval_acc_quant")
MIN_POOL = 10


def acc_at_05(params, model_cfg, testset: Sequence[Sample], cfg: TrainConfig | None = None) -> dict[str, float]:
    """Acc@0.5 of both heads; ``"regression"`` is the primary number."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    if any(s.gold is None for s in testset):
        raise ValueError("test samples need gold boxes")
    reg, quant = trainer.evaluate(params, model_cfg, testset, cfg)
    return {"regression": reg, "quantized": quant}


# ---------------------------------------------------------------- quality curves


@dataclass
class QualityCurve:
    thresholds: tuple[int, ...]
    accuracy: dict[str, tuple[float, ...]]
    n_selected: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def rankers(self) -> tuple[str, ...]:
        return tuple(self.accuracy)

    def at(self, ranker: str, threshold: int) -> float:
        return self.accuracy[ranker][self.thresholds.index(threshold)]

    def auc(self, ranker: str) -> float:
        """Trapezoidal area under accuracy vs. threshold, divided by the threshold span."""
        x = np.asarray(self.thresholds, dtype=np.float64)
        y = np.asarray(self.accuracy[ranker], dtype=np.float64)
        order = np.argsort(x)
        x, y = x[order], y[order]
        span = x[-1] - x[0]
        if span == 0:
            return float(y[0])
        return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0 / span)

    def rows(self) -> list[dict[str, str]]:
        out = []
        for r in self.rankers:
            counts = self.n_selected.get(r, (0,) * len(self.thresholds))
            for t, a, n in zip(self.thresholds, self.accuracy[r], counts):
                out.append({"ranker": r, "threshold": str(t), "n_selected": str(n), "accuracy": repr(float(a))})
        return out

    @classmethod
    def from_rows(cls, rows: Sequence[dict[str, str]]) -> "QualityCurve":
        thresholds: list[int] = []
        acc: dict[str, list[float]] = {}
        counts: dict[str, list[int]] = {}
        for row in rows:
            t = int(row["threshold"])
            if t not in thresholds:
                thresholds.append(t)
            acc.setdefault(row["ranker"], []).append(float(row["accuracy"]))
            counts.setdefault(row["ranker"], []).append(int(row["n_selected"]))
        return cls(tuple(thresholds), {k: tuple(v) for k, v in acc.items()}, {k: tuple(v) for k, v in counts.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, QualityCurve):
            return NotImplemented
        return (
            self.thresholds == other.thresholds
            and self.accuracy == other.accuracy
            and self.n_selected == other.n_selected
        )


def ranker_keys(pool: Sequence[PseudoLabel], ranker: str, rng: np.random.Generator | None = None, ious=None):
    """Sort keys (higher is better) for one ranker over a scored pool."""
    if ranker == "random":
        if rng is None:
            raise ValueError("random ranker needs an rng")
        return rng.random(len(pool))
    if ranker in curation.METRICS:
        return np.array([getattr(p.scores, ranker) for p in pool], dtype=np.float64)
    if ranker == "fused":
        return curation.fuse([p.scores for p in pool])
    if ranker == "oracle":
        if ious is None:
            raise ValueError("oracle ranker needs the true IoUs")
        return np.asarray(ious, dtype=np.float64)
    raise ValueError(f"unknown ranker {ranker!r}")


def pool_ious(pool: Sequence[PseudoLabel], gold: GoldView) -> np.ndarray:
    """IoU of every pseudo box with its sealed gold box (evaluation only)."""
    boxes = np.stack([p.box for p in pool])
    golds = gold.boxes([p.sample_id for p in pool])
    return geometry.iou(geometry.to_corners(boxes), geometry.to_corners(golds))


def quality_curve(
    pool: Sequence[PseudoLabel],
    gold: GoldView,
    rankers: Sequence[str] = RANKERS,
    thresholds: Sequence[int] = THRESHOLDS,
    seed: int = 0,
) -> QualityCurve:
    """Acc@0.5 of the top-k% pseudo labels under each ranker.

    ``gold`` is only used to grade the selections. Add ``"oracle"`` to
    ``rankers`` to rank by the true IoU.
    """
    if len(pool) < MIN_POOL:
        raise ValueError(f"pool has {len(pool)} samples; need at least {MIN_POOL}")
    thresholds = tuple(int(t) for t in thresholds)
    if list(thresholds) != sorted(thresholds, reverse=True):
        raise ValueError("thresholds must be descending")
    ious = pool_ious(pool, gold)
    correct = ious > 0.5
    ids = np.array([p.sample_id for p in pool])
    acc, counts = {}, {}
    for r in rankers:
        keys = ranker_keys(pool, r, stream(seed, "random-ranker"), ious)
        order = curation.rank_order(keys, ids)
        row, nrow = [], []
        for t in thresholds:
            k = max(curation.budget(t, len(pool)), 1)
            row.append(100.0 * float(correct[order[:k]].mean()))
            nrow.append(k)
        acc[r], counts[r] = tuple(row), tuple(nrow)
    return QualityCurve(thresholds, acc, counts)


def mean_curve(curves: Sequence[QualityCurve]) -> tuple[QualityCurve, QualityCurve]:
    """Element-wise mean and standard deviation across seeds."""
    if not curves:
        raise ValueError("no curves to average")
    th = curves[0].thresholds
    mean, std = {}, {}
    for r in curves[0].rankers:
        stack = np.array([c.accuracy[r] for c in curves])
        mean[r] = tuple(float(v) for v in stack.mean(axis=0))
        std[r] = tuple(float(v) for v in stack.std(axis=0))
    return QualityCurve(th, mean), QualityCurve(th, std)


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationResult:
    subset: str
    selected: int
    precision: float
    eval_acc: float
    eval_acc_quant: float

    def row(self) -> dict[str, str]:
        return {
            "subset": self.subset or "none",
            "selected": str(self.selected),
            "precision": repr(float(self.precision)),
            "eval_acc": repr(float(self.eval_acc)),
            "eval_acc_quant": repr(float(self.eval_acc_quant)),
        }

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "AblationResult":
        subset = "" if row["subset"] == "none" else row["subset"]
        return cls(subset, int(row["selected"]), float(row["precision"]), float(row["eval_acc"]), float(row["eval_acc_quant"]))


def subset_code(metrics: Sequence[str] | str) -> str:
    names = curation.parse_metric_subset(metrics)
    return "".join(n[0] for n in names)


def ablation(
    cfg: TrainConfig,
    metric_subset: Sequence[str] | str,
    state: "trainer.TrainState",
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample],
    test: Sequence[Sample],
    gold: GoldView | None = None,
    stage: int = 1,
) -> AblationResult:
    """One active stage from a copy of ``state`` using only ``metric_subset``.

    An empty subset ranks the pool randomly (the control). ``gold`` is used
    only to grade the precision of the selected pseudo labels.
    """
    code = subset_code(metric_subset)
    work = state.copy()
    report, scored = trainer.active_stage(work, labeled, unlabeled, cfg, stage, code)
    chosen = [p for p in scored if p.selected]
    precision = float("nan")
    if gold is not None and chosen:
        precision = 100.0 * float((pool_ious(chosen, gold) > 0.5).mean())
    acc = acc_at_05(work.params, work.model_cfg, test, cfg)
    return AblationResult(code, len(chosen), precision, acc["regression"], acc["quantized"])


# ---------------------------------------------------------------- emission


def _write_csv(rows: Sequence[dict[str, str]], fields: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def read_curve(path: str | Path) -> QualityCurve:
    return QualityCurve.from_rows(_read_csv(path))


def read_ablation(path: str | Path) -> list[AblationResult]:
    return [AblationResult.from_row(r) for r in _read_csv(path)]


def _plot_curve(curve: QualityCurve, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in curve.rankers:
        ax.plot(curve.thresholds, curve.accuracy[r], marker="o", label=r)
    ax.invert_xaxis()
    ax.set_xlabel("top-k% of pool")
    ax.set_ylabel("Acc@0.5 of selected (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _plot_ablation(results: Sequence[AblationResult], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [r.subset or "random" for r in results]
    ax.bar(labels, [r.eval_acc for r in results])
    ax.set_ylabel("test Acc@0.5 (%)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit(
    report: QualityCurve | Sequence[AblationResult],
    out_dir: str | Path,
    name: str,
    formats: Sequence[str] = ("csv",),
) -> list[Path]:
    """Write ``<name>.csv`` (always) and ``<name>.png`` when ``"png"`` is requested."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bad = set(formats) - {"csv", "png"}
    if bad:
        raise ValueError(f"unknown output formats {sorted(bad)}")
    written = []
    csv_path = out / f"{name}.csv"
    if isinstance(report, QualityCurve):
        _write_csv(report.rows(), CURVE_FIELDS, csv_path)
    else:
        _write_csv([r.row() for r in report], ABLATION_FIELDS, csv_path)
    written.append(csv_path)
    if "png" in formats:
        png_path = out / f"{name}.png"
        if isinstance(report, QualityCurve):
            _plot_curve(report, png_path)
        else:
            _plot_ablation(report, png_path)
        written.append(png_path)
    return written
