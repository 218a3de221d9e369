"""scikit-learn style estimators around the training pipeline.

``X`` is a sequence of :class:`~actress.synthdata.Sample` and ``y`` an
``(n, 4)`` array of center-format boxes. Rows of ``y`` that are all NaN mark
unlabeled samples; their gold boxes (if any) are stripped before training.

>>> from actress.synthdata import GenSpec, generate_dataset
>>> data = generate_dataset(GenSpec(n=200, seed=1))
>>> y = boxes_of(data)
>>> y[20:] = np.nan                      # keep 20 labels
>>> est = ActressGrounder(burn_in_epochs=2, stage_epochs=1, n_stages=1)
>>> est.fit(data, y).predict(data[:3]).shape
(3, 4)
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import geometry, trainer
from .config import TrainConfig
from .synthdata import Sample, strip_label

__all__ = ["ActressGrounder", "SupervisedGrounder", "check_samples", "check_boxes", "boxes_of"]


def check_samples(X) -> list[Sample]:
    """Validate ``X`` as a non-empty sequence of samples with unique ids."""
    if isinstance(X, Sample):
        raise TypeError("X must be a sequence of Sample, got a single Sample")
    samples = list(X)
    if not samples:
        raise ValueError("X is empty")
    bad = [type(s).__name__ for s in samples if not isinstance(s, Sample)]
    if bad:
        raise TypeError(f"X must contain Sample objects, found {bad[0]}")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids in X must be unique")
    return samples


def check_boxes(y, n_samples: int, allow_missing: bool = True) -> np.ndarray:
    """Validate ``y`` as ``(n_samples, 4)`` boxes inside the unit square.

    With ``allow_missing`` whole-NaN rows are accepted (unlabeled); rows
    that are partly NaN are always rejected.
    """
    y = check_array(y, dtype=np.float64, ensure_all_finite="allow-nan" if allow_missing else True)
    if y.shape != (n_samples, 4):
        raise ValueError(f"y must have shape ({n_samples}, 4), got {y.shape}")
    nan = np.isnan(y)
    partial = nan.any(axis=1) & ~nan.all(axis=1)
    if partial.any():
        raise ValueError(f"row {int(np.argmax(partial))} of y is partly NaN")
    known = y[~nan.any(axis=1)]
    if np.any(known[:, :2] < 0) or np.any(known[:, :2] > 1) or np.any(known[:, 2:] <= 0):
        raise ValueError("boxes must have centers in [0, 1] and positive size")
    return y


def boxes_of(samples: Sequence[Sample]) -> np.ndarray:
    """Gold boxes as an ``(n, 4)`` array; unlabeled samples give NaN rows."""
    return np.array([s.gold if s.gold is not None else [np.nan] * 4 for s in samples], dtype=np.float64)


class _GrounderBase(BaseEstimator):
    def __init__(
        self,
        burn_in_epochs: int = 60,
        stage_epochs: int = 60,
        n_stages: int = 5,
        batch_size: int = 16,
        lr: float = 2e-3,
        d_model: int = 32,
        n_heads: int = 2,
        n_layers: int = 2,
        n_bins: int = 32,
        metrics: str = "frc",
        sample_percent: float = 0.0,
        augment: bool = True,
        seed: int = 0,
    ):
        self.burn_in_epochs = burn_in_epochs
        self.stage_epochs = stage_epochs
        self.n_stages = n_stages
        self.batch_size = batch_size
        self.lr = lr
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.n_bins = n_bins
        self.metrics = metrics
        self.sample_percent = sample_percent
        self.augment = augment
        self.seed = seed

    def _config(self, samples: Sequence[Sample], label_fraction: float) -> TrainConfig:
        return TrainConfig(
            n_samples=len(samples),
            grid_size=samples[0].scene.grid_size,
            label_fraction=label_fraction,
            burn_in_epochs=self.burn_in_epochs,
            stage_epochs=self.stage_epochs,
            n_stages=self.n_stages,
            batch_size=self.batch_size,
            lr=self.lr,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            n_bins=self.n_bins,
            metrics=self.metrics,
            sample_percent=self.sample_percent,
            augment=self.augment,
            seed=self.seed,
        )

    def _split(self, X, y):
        samples = check_samples(X)
        y = check_boxes(y, len(samples))
        has = ~np.isnan(y).any(axis=1)
        if not has.any():
            raise ValueError("y has no labeled rows")
        labeled = [dataclasses.replace(s, gold=y[i].copy()) for i, s in enumerate(samples) if has[i]]
        unlabeled = [strip_label(s) for i, s in enumerate(samples) if not has[i]]
        return samples, labeled, unlabeled

    def predict(self, X) -> np.ndarray:
        """Regression-head boxes, ``(n, 4)`` center format."""
        check_is_fitted(self, "params_")
        samples = check_samples(X)
        box, _, _ = trainer.predict(self.params_, self.model_cfg_, samples, self.config_)
        return box

    def predict_quantized(self, X) -> np.ndarray:
        """Dequantized classification-head boxes, ``(n, 4)``."""
        check_is_fitted(self, "params_")
        _, qbox, _ = trainer.predict(self.params_, self.model_cfg_, check_samples(X), self.config_)
        return qbox

    def score(self, X, y) -> float:
        """Acc@0.5 of the regression head as a fraction in [0, 1]."""
        samples = check_samples(X)
        y = check_boxes(y, len(samples), allow_missing=False)
        return geometry.hit_rate(self.predict(samples), y) / 100.0


class ActressGrounder(_GrounderBase):
    """Burn-in on the labeled rows, then ``n_stages`` pseudo-label rounds."""

    def fit(self, X, y):
        samples, labeled, unlabeled = self._split(X, y)
        self.config_ = self._config(samples, len(labeled) / len(samples))
        state, reports = trainer.run_actress(self.config_, labeled, unlabeled)
        self.params_, self.model_cfg_ = state.params, state.model_cfg
        self.reports_ = reports
        self.n_labeled_, self.n_unlabeled_ = len(labeled), len(unlabeled)
        return self


class SupervisedGrounder(_GrounderBase):
    """Labeled rows only, with the step budget a matching ACTRESS run would use."""

    def fit(self, X, y):
        samples, labeled, unlabeled = self._split(X, y)
        self.config_ = self._config(samples, len(labeled) / len(samples))
        state, reports = trainer.run_supervised_baseline(self.config_, labeled, len(unlabeled))
        self.params_, self.model_cfg_ = state.params, state.model_cfg
        self.reports_ = reports
        self.n_labeled_, self.n_unlabeled_ = len(labeled), len(unlabeled)
        return self
