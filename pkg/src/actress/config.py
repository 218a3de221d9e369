"""Run configuration, config-file IO and named random streams.

Config files are INI-style with a single ``[actress]`` section of
``key = value`` lines; unknown keys are rejected, missing keys take the
defaults below. Example::

    [actress]
    seed = 3
    label_fraction = 0.05
    n_stages = 5
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import LossWeights, ModelConfig

SECTION = "actress"


@dataclass(frozen=True)
class TrainConfig:
    # data
    n_samples: int = 5000
    n_test: int = 1000
    grid_size: int = 8
    label_fraction: float = 0.10
    # model
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    n_bins: int = 32
    # optimisation
    burn_in_epochs: int = 60
    stage_epochs: int = 60
    n_stages: int = 5
    batch_size: int = 16
    labeled_ratio: float = 0.75
    lr: float = 2e-3
    lr_drop_at: float = 0.8
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    loss_l1: float = 5.0
    loss_giou: float = 2.0
    loss_ce: float = 0.1
    pseudo_weight: float = 1.0
    augment: bool = True
    # pseudo-label curation; sample_percent <= 0 means "label_fraction * 100"
    sample_percent: float = 0.0
    metrics: str = "frc"
    confidence_combine: str = "product"
    relevance_normalize: bool = False
    # "initial" restores the run's starting backbone draw, "fresh" redraws it
    reinit_backbone: str = "initial"
    # execution
    seed: int = 0
    threads: int = 1
    eval_batch: int = 128

    def __post_init__(self):
        if min(self.burn_in_epochs, self.stage_epochs, self.n_stages) < 0:
            raise ValueError("epoch and stage counts must be non-negative")
        if not 0.5 <= self.labeled_ratio <= 1.0:
            raise ValueError("labeled_ratio must keep labeled samples >= pseudo samples per batch")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.reinit_backbone not in ("initial", "fresh"):
            raise ValueError(f"reinit_backbone must be 'initial' or 'fresh', got {self.reinit_backbone!r}")
        if self.confidence_combine not in ("product", "sum"):
            raise ValueError(f"confidence_combine must be 'product' or 'sum', got {self.confidence_combine!r}")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            grid_size=self.grid_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            d_ff=self.d_ff,
            n_bins=self.n_bins,
        )

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_l1, self.loss_giou, self.loss_ce)

    @property
    def n_percent(self) -> float:
        return self.sample_percent if self.sample_percent > 0 else self.label_fraction * 100.0

    @property
    def labeled_per_batch(self) -> int:
        return math.ceil(self.labeled_ratio * self.batch_size)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw.strip()


def config_from_mapping(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    unknown = set(values) - set(types)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return base.replace(**{k: _coerce(types[k], v) for k, v in values.items()})


def load_config(path: str | Path) -> TrainConfig:
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section(SECTION):
        raise ValueError(f"{path}: missing [{SECTION}] section")
    return config_from_mapping(dict(parser.items(SECTION)))


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"[{SECTION}]"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def stream_seed(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra])


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named, reproducible random stream derived from the root seed."""
    return np.random.default_rng(stream_seed(seed, name, *extra))


def derived_int(seed: int, name: str, *extra: int) -> int:
    return int(stream_seed(seed, name, *extra).generate_state(1)[0])
