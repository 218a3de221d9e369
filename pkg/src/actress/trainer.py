"""Burn-in, active retraining rounds and the supervised baseline.

Stage 0 is the burn-in on labeled data. Each later stage scores the whole
unlabeled pool with the current model, keeps the top-N% by fused score as
pseudo labels (dropping the previous round's), redraws the backbone and head
parameters, and trains on labeled plus pseudo-labeled batches.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attribution, curation, geometry
from . import model as M
from .config import TrainConfig, derived_int, stream
from .curation import PseudoLabel, ScoreTriple
from .synthdata import Sample, augment, encode_batch

log = logging.getLogger(__name__)

REPORT_FIELDS = (
    "stage", "kind", "pool_size", "selected", "mean_fused", "steps", "epoch_losses", "eval_acc", "eval_acc_quant",
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    opt: M.AdamW
    model_cfg: M.ModelConfig
    steps: int = 0

    def copy(self) -> "TrainState":
        opt = M.AdamW(
            self.opt.beta1, self.opt.beta2, self.opt.eps, self.opt.weight_decay,
            {k: v.copy() for k, v in self.opt.m.items()},
            {k: v.copy() for k, v in self.opt.v.items()},
            dict(self.opt.t),
            self.opt.skipped,
        )
        return TrainState({k: v.copy() for k, v in self.params.items()}, opt, self.model_cfg, self.steps)


@dataclass
class StageReport:
    stage: int
    kind: str
    pool_size: int = 0
    selected: int = 0
    mean_fused: float = float("nan")
    steps: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    eval_acc: float = float("nan")
    eval_acc_quant: float = float("nan")

    def row(self) -> dict[str, str]:
        out = {}
        for name in REPORT_FIELDS:
            v = getattr(self, name)
            if name == "epoch_losses":
                out[name] = ";".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                out[name] = repr(v)
            else:
                out[name] = str(v)
        return out

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "StageReport":
        losses = [float(x) for x in row["epoch_losses"].split(";") if x]
        return cls(
            int(row["stage"]), row["kind"], int(row["pool_size"]), int(row["selected"]),
            float(row["mean_fused"]), int(row["steps"]), losses,
            float(row["eval_acc"]), float(row["eval_acc_quant"]),
        )


def write_reports(reports: Sequence[StageReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def read_reports(path: str | Path) -> list[StageReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [StageReport.from_row(r) for r in csv.DictReader(fh)]


def new_state(cfg: TrainConfig) -> TrainState:
    mc = cfg.model
    return TrainState(M.init_params(mc, derived_int(cfg.seed, "init")), M.AdamW(weight_decay=cfg.weight_decay), mc)


# ---------------------------------------------------------------- batching


def compose_batch(
    labeled: Sequence[Sample],
    pseudo: Sequence[Sample],
    batch_size: int,
    rng: np.random.Generator,
    labeled_ratio: float = 0.75,
) -> list[Sample]:
    """One mixed batch: ``ceil(ratio * batch_size)`` labeled, the rest pseudo.

    Draws are without replacement within each source; with no pseudo labels
    the whole batch is labeled.
    """
    if not labeled:
        raise ValueError("labeled set is empty")
    n_lab = batch_size if not pseudo else math.ceil(labeled_ratio * batch_size)
    n_ps = batch_size - n_lab
    lab_idx = rng.choice(len(labeled), size=min(n_lab, len(labeled)), replace=False)
    ps_idx = rng.choice(len(pseudo), size=min(n_ps, len(pseudo)), replace=False) if n_ps else []
    return [labeled[i] for i in lab_idx] + [pseudo[i] for i in ps_idx]


def _cycled(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` indices from back-to-back permutations of ``range(n)``."""
    reps = math.ceil(count / n) if n else 0
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:count] if reps else np.zeros(0, int)


def epoch_batches(
    labeled: Sequence[Sample],
    pseudo: Sequence[Sample],
    batch_size: int,
    labeled_ratio: float,
    rng: np.random.Generator,
) -> list[list[Sample]]:
    """One epoch: every labeled sample once, pseudo samples filling the 3:1 mix.

    Pseudo samples are drawn without replacement, reshuffling only when the
    pool runs out. The final batch keeps the same labeled:pseudo proportion.
    """
    if not pseudo:
        order = rng.permutation(len(labeled))
        return [[labeled[i] for i in order[s : s + batch_size]] for s in range(0, len(labeled), batch_size)]
    n_lab = math.ceil(labeled_ratio * batch_size)
    n_ps = batch_size - n_lab
    order = rng.permutation(len(labeled))
    chunks = [order[s : s + n_lab] for s in range(0, len(labeled), n_lab)]
    counts = [n_ps if len(c) == n_lab else int(round(len(c) * n_ps / n_lab)) for c in chunks]
    ps_order = _cycled(len(pseudo), sum(counts), rng)
    out, pos = [], 0
    for c, k in zip(chunks, counts):
        out.append([labeled[i] for i in c] + [pseudo[i] for i in ps_order[pos : pos + k]])
        pos += k
    return out


def steps_per_epoch(n_labeled: int, n_pseudo: int, cfg: TrainConfig) -> int:
    per = cfg.batch_size if n_pseudo == 0 else cfg.labeled_per_batch
    return math.ceil(n_labeled / per)


def labeled_only_epoch(labeled: Sequence[Sample], n_steps: int, batch_size: int, rng) -> list[list[Sample]]:
    idx = _cycled(len(labeled), n_steps * batch_size, rng)
    return [[labeled[i] for i in idx[s * batch_size : (s + 1) * batch_size]] for s in range(n_steps)]


# ---------------------------------------------------------------- training


def lr_at(epoch: int, n_epochs: int, cfg: TrainConfig) -> float:
    drop = epoch >= math.floor(cfg.lr_drop_at * n_epochs)
    return cfg.lr * (cfg.lr_drop_factor if drop else 1.0)


def train_step(state: TrainState, batch: Sequence[Sample], cfg: TrainConfig, lr: float) -> float:
    vis, tokens = encode_batch(batch, state.model_cfg.t_max)
    target = np.stack([s.gold for s in batch])
    sw = np.array([cfg.pseudo_weight if s.pseudo else 1.0 for s in batch])
    loss, grads, _, _ = M.loss_and_grads(state.params, state.model_cfg, vis, tokens, target, cfg.loss_weights, sw)
    if not state.opt.step(state.params, grads, lr):
        log.warning("non-finite gradients at step %d; step skipped", state.steps)
    state.steps += 1
    return loss


def train_epochs(
    state: TrainState,
    epochs: Sequence[Sequence[Sequence[Sample]]],
    cfg: TrainConfig,
    aug_rng: np.random.Generator | None,
) -> list[float]:
    """Run pre-built epochs of batches with the per-phase step LR schedule."""
    losses = []
    for e, batches in enumerate(epochs):
        lr = lr_at(e, len(epochs), cfg)
        tot = 0.0
        for batch in batches:
            if aug_rng is not None:
                batch = [augment(s, aug_rng) for s in batch]
            loss = train_step(state, batch, cfg, lr)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss {loss} at step {state.steps}")
            tot += loss
        losses.append(tot / max(len(batches), 1))
    return losses


def burn_in(state: TrainState, labeled: Sequence[Sample], cfg: TrainConfig, n_epochs: int | None = None) -> list[float]:
    """Supervised training on labeled data; mutates ``state`` and returns per-epoch losses."""
    if not labeled:
        raise ValueError("burn-in needs labeled samples")
    n_epochs = cfg.burn_in_epochs if n_epochs is None else n_epochs
    rng = stream(cfg.seed, "train", 0)
    epochs = [epoch_batches(labeled, [], cfg.batch_size, cfg.labeled_ratio, rng) for _ in range(n_epochs)]
    aug = stream(cfg.seed, "augment", 0) if cfg.augment else None
    try:
        return train_epochs(state, epochs, cfg, aug)
    except FloatingPointError as exc:
        raise TrainingDiverged(str(exc)) from exc


# ---------------------------------------------------------------- inference


def _chunks(samples: Sequence[Sample], size: int):
    return [samples[i : i + size] for i in range(0, len(samples), size)]


def _map_chunks(fn, samples: Sequence[Sample], cfg: TrainConfig):
    chunks = _chunks(samples, cfg.eval_batch)
    if cfg.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            return list(ex.map(fn, chunks))
    return [fn(c) for c in chunks]


def predict(params, model_cfg: M.ModelConfig, samples: Sequence[Sample], cfg: TrainConfig | None = None):
    """Regression boxes, dequantized classification boxes and logits for ``samples``."""
    cfg = cfg or TrainConfig()

    def run(chunk):
        vis, tokens = encode_batch(chunk, model_cfg.t_max)
        out = M.forward(params, model_cfg, vis, tokens)
        return out.box, out.quant_logits

    parts = _map_chunks(run, samples, cfg)
    box = np.concatenate([p[0] for p in parts])
    logits = np.concatenate([p[1] for p in parts])
    qbox = geometry.dequantize(logits.argmax(axis=-1), model_cfg.n_bins)
    return box, qbox, logits


def evaluate(params, model_cfg, samples: Sequence[Sample], cfg: TrainConfig | None = None) -> tuple[float, float]:
    """Acc@0.5 (percent) of the regression head and of the quantized head."""
    box, qbox, _ = predict(params, model_cfg, samples, cfg)
    gold = np.stack([s.gold for s in samples])
    return geometry.hit_rate(box, gold), geometry.hit_rate(qbox, gold)


def score_batch(params, model_cfg: M.ModelConfig, chunk: Sequence[Sample], cfg: TrainConfig):
    """Forward + attention-gradient pass for one chunk; returns raw per-sample outputs."""
    vis, tokens = encode_batch(chunk, model_cfg.t_max)
    out = M.forward(params, model_cfg, vis, tokens)
    M.grad_of_argmax_sum(params, out)
    maps, degenerate = attribution.attribution_maps(
        out.attention, out.attention_grad, model_cfg.grid_size, cfg.relevance_normalize, out.visual_cells
    )
    box = out.box
    qidx = out.quant_logits.argmax(axis=-1)
    qbox_center = geometry.dequantize(qidx, model_cfg.n_bins)
    i_f, _ = attribution.faithfulness(maps, box)
    i_r = curation.robustness(box, qbox_center)
    i_c = curation.confidence(out.quant_logits, cfg.confidence_combine)
    return dict(box=box, qidx=qidx, maps=maps, degenerate=degenerate, i_f=i_f, i_r=i_r, i_c=i_c)


def infer_unlabeled(state_or_params, unlabeled: Sequence[Sample], cfg: TrainConfig, model_cfg=None) -> list[PseudoLabel]:
    """Score every unlabeled sample; parameters are read only."""
    if isinstance(state_or_params, TrainState):
        params, model_cfg = state_or_params.params, state_or_params.model_cfg
    else:
        params = state_or_params
    parts = _map_chunks(lambda c: score_batch(params, model_cfg, c, cfg), unlabeled, cfg)
    pool = []
    k = 0
    for part in parts:
        for j in range(len(part["box"])):
            s = unlabeled[k]
            pool.append(
                PseudoLabel(
                    sample_id=s.id,
                    box=part["box"][j].copy(),
                    qbox=geometry.quantize(part["box"][j], model_cfg.n_bins),
                    scores=ScoreTriple(float(part["i_f"][j]), float(part["i_r"][j]), float(part["i_c"][j])),
                    degenerate=bool(part["degenerate"][j]),
                )
            )
            k += 1
    return pool


# ---------------------------------------------------------------- stages


def select_pseudo(
    pool: list[PseudoLabel], n_unlabeled: int, cfg: TrainConfig, metrics: Sequence[str] | str, rng
) -> tuple[list[PseudoLabel], list[PseudoLabel]]:
    """Fuse the chosen metrics and take the top N%; no metrics means random ranking."""
    metrics = curation.parse_metric_subset(metrics)
    if not pool:
        return [], []
    if metrics:
        scored = curation.with_fused_scores(pool, metrics)
    else:
        keys = rng.random(len(pool))
        scored = [dataclasses.replace(p, i_act=float(k)) for p, k in zip(pool, keys)]
    return scored, curation.sample_top(scored, cfg.n_percent, n_unlabeled)


def active_stage(
    state: TrainState,
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample],
    cfg: TrainConfig,
    stage: int,
    metrics: Sequence[str] | str | None = None,
    n_epochs: int | None = None,
) -> tuple[StageReport, list[PseudoLabel]]:
    """One round: score pool, select, re-initialize, train. Mutates ``state``.

    Returns the report and the scored pool (selected entries flagged).
    """
    metrics = cfg.metrics if metrics is None else metrics
    n_epochs = cfg.stage_epochs if n_epochs is None else n_epochs
    pool = infer_unlabeled(state, unlabeled, cfg)
    scored, selected = select_pseudo(pool, len(unlabeled), cfg, metrics, stream(cfg.seed, "random-rank", stage))
    if not selected:
        log.warning("stage %d: no pseudo labels selected; training on labeled data only", stage)

    by_id = {s.id: s for s in unlabeled}
    pseudo = [dataclasses.replace(by_id[p.sample_id], gold=p.box.copy(), pseudo=True) for p in selected]

    backbone_seed = derived_int(cfg.seed, "init") if cfg.reinit_backbone == "initial" else None
    state.params = M.reinit_selective(
        state.params, state.model_cfg, derived_int(cfg.seed, "reinit", stage), backbone_seed
    )
    state.opt.reset([n for n in state.params if M.partition_of(n) != M.FUSION])

    rng = stream(cfg.seed, "train", stage)
    epochs = [epoch_batches(labeled, pseudo, cfg.batch_size, cfg.labeled_ratio, rng) for _ in range(n_epochs)]
    aug = stream(cfg.seed, "augment", stage) if cfg.augment else None
    start = state.steps
    try:
        losses = train_epochs(state, epochs, cfg, aug)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"stage {stage}: {exc}") from exc

    sel_ids = {p.sample_id for p in selected}
    scored = [dataclasses.replace(p, selected=p.sample_id in sel_ids) for p in scored]
    report = StageReport(
        stage=stage,
        kind="active",
        pool_size=len(pool),
        selected=len(selected),
        mean_fused=float(np.mean([p.i_act for p in selected])) if selected else float("nan"),
        steps=state.steps - start,
        epoch_losses=losses,
    )
    return report, scored


def _eval_into(report: StageReport, state: TrainState, test, cfg) -> None:
    if test:
        report.eval_acc, report.eval_acc_quant = evaluate(state.params, state.model_cfg, test, cfg)


def _checkpoint_path(out_dir: Path, stage: int, prefix: str = "stage") -> Path:
    return out_dir / "checkpoints" / f"{prefix}_{stage:02d}.npz"


def _latest_checkpoint(out_dir: Path, n_stages: int) -> int:
    for m in range(n_stages, -1, -1):
        if _checkpoint_path(out_dir, m).exists():
            return m
    return -1


def _persist(out_dir, state: TrainState, stage: int, reports, report_name: str, prefix: str = "stage") -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(_checkpoint_path(out_dir, stage, prefix), state.params, state.model_cfg, state.opt,
                      meta={"stage": stage, "steps": state.steps})
    write_reports(reports, out_dir / report_name)


def write_pool_manifest(pool: Sequence[PseudoLabel], path: str | Path) -> None:
    """One CSV row per pool entry: id, box, quantized box, raw scores, fused score, selected."""
    fields = ("sample_id", "cx", "cy", "w", "h", "qx", "qy", "qw", "qh",
              "faithfulness", "robustness", "confidence", "i_act", "degenerate", "selected")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for p in pool:
            w.writerow([p.sample_id, *map(repr, map(float, p.box)), *map(int, p.qbox),
                        *map(repr, p.scores.as_tuple()), repr(float(p.i_act)), int(p.degenerate), int(p.selected)])


def read_pool_manifest(path: str | Path) -> list[PseudoLabel]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        PseudoLabel(
            sample_id=int(r["sample_id"]),
            box=np.array([float(r[k]) for k in ("cx", "cy", "w", "h")]),
            qbox=np.array([int(r[k]) for k in ("qx", "qy", "qw", "qh")]),
            scores=ScoreTriple(float(r["faithfulness"]), float(r["robustness"]), float(r["confidence"])),
            i_act=float(r["i_act"]),
            degenerate=bool(int(r["degenerate"])),
            selected=bool(int(r["selected"])),
        )
        for r in rows
    ]


def run_burn_in(cfg: TrainConfig, labeled: Sequence[Sample], test=None) -> tuple[TrainState, StageReport]:
    state = new_state(cfg)
    losses = burn_in(state, labeled, cfg)
    report = StageReport(0, "burn_in", steps=state.steps, epoch_losses=losses)
    _eval_into(report, state, test, cfg)
    return state, report


def run_actress(
    cfg: TrainConfig,
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample],
    test: Sequence[Sample] | None = None,
    out_dir: str | Path | None = None,
    burn_in_result: tuple[TrainState, StageReport] | None = None,
) -> tuple[TrainState, list[StageReport]]:
    """Burn-in then ``cfg.n_stages`` active rounds.

    With ``out_dir`` a checkpoint, the pool manifest and ``reports.csv`` are
    written after every stage, and an interrupted run resumes from the last
    checkpoint.
    """
    out = Path(out_dir) if out_dir is not None else None
    start = _latest_checkpoint(out, cfg.n_stages) if out is not None else -1
    if start >= 0:
        params, mc, opt, meta = M.load_checkpoint(_checkpoint_path(out, start))
        state = TrainState(params, opt, mc, int(meta["steps"]))
        reports = read_reports(out / "reports.csv")[: start + 1]
        log.info("resuming from stage %d", start)
    else:
        if burn_in_result is not None:
            state, rep = burn_in_result[0].copy(), dataclasses.replace(burn_in_result[1])
        else:
            state, rep = run_burn_in(cfg, labeled, test)
        reports = [rep]
        _persist(out, state, 0, reports, "reports.csv")
        start = 0
    for m in range(start + 1, cfg.n_stages + 1):
        report, pool = active_stage(state, labeled, unlabeled, cfg, m)
        _eval_into(report, state, test, cfg)
        reports.append(report)
        log.info("stage %d: selected %d/%d, acc %.2f", m, report.selected, report.pool_size, report.eval_acc)
        if out is not None:
            (out / "pools").mkdir(parents=True, exist_ok=True)
            write_pool_manifest(pool, out / "pools" / f"stage_{m:02d}.csv")
        _persist(out, state, m, reports, "reports.csv")
    return state, reports


def run_supervised_baseline(
    cfg: TrainConfig,
    labeled: Sequence[Sample],
    n_unlabeled: int,
    test: Sequence[Sample] | None = None,
    out_dir: str | Path | None = None,
    burn_in_result: tuple[TrainState, StageReport] | None = None,
) -> tuple[TrainState, list[StageReport]]:
    """Labeled-only training with the same phase structure and step budget as ``run_actress``.

    Each continuation phase runs exactly as many optimizer steps as the
    matching active round would, with full labeled batches and no
    re-initialization.
    """
    if burn_in_result is not None:
        state, rep = burn_in_result[0].copy(), dataclasses.replace(burn_in_result[1])
    else:
        state, rep = run_burn_in(cfg, labeled, test)
    reports = [rep]
    out = Path(out_dir) if out_dir is not None else None
    _persist(out, state, 0, reports, "baseline_reports.csv", "baseline")
    n_pseudo = min(curation.budget(cfg.n_percent, n_unlabeled), n_unlabeled) if n_unlabeled else 0
    per_epoch = steps_per_epoch(len(labeled), n_pseudo, cfg)
    for m in range(1, cfg.n_stages + 1):
        rng = stream(cfg.seed, "baseline-train", m)
        epochs = [labeled_only_epoch(labeled, per_epoch, cfg.batch_size, rng) for _ in range(cfg.stage_epochs)]
        aug = stream(cfg.seed, "baseline-augment", m) if cfg.augment else None
        start = state.steps
        losses = train_epochs(state, epochs, cfg, aug)
        report = StageReport(m, "supervised", steps=state.steps - start, epoch_losses=losses)
        _eval_into(report, state, test, cfg)
        reports.append(report)
        _persist(out, state, m, reports, "baseline_reports.csv", "baseline")
    return state, reports
