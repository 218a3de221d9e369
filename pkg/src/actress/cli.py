"""Command-line entry point: ``actress <subcommand> [flags]``.

Subcommands: ``gen-data``, ``burn-in``, ``run``, ``baseline``, ``analyze``.
Run directories look like::

    <out-dir>/manifest.json
    <out-dir>/config.cfg
    <out-dir>/reports.csv              run / burn-in
    <out-dir>/baseline_reports.csv     baseline
    <out-dir>/checkpoints/stage_00.npz ... stage_<K>.npz
    <out-dir>/pools/stage_01.csv ...   scored pool per active stage
    <out-dir>/analysis/*.csv|png       analyze

The out-dir comes from ``--out-dir``, else ``$ACTRESS_OUT_DIR``, else
``runs/default``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, attribution, evalreport, trainer
from . import model as M
from .config import TrainConfig, config_from_mapping, derived_int, dump_config, load_config, save_config
from .synthdata import GenSpec, GoldView, SplitSpec, dumps, encode_batch, generate_dataset, load_dataset, save_dataset, split

log = logging.getLogger("actress")

OUT_DIR_ENV = "ACTRESS_OUT_DIR"
DEFAULT_OUT_DIR = "runs/default"
MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class CliError(Exception):
    """Expected failure reported as ``error: <kind>: <message>`` with exit code 1."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------- data


def make_datasets(cfg: TrainConfig):
    """Train pool and held-out test set, both derived from the root seed."""
    data = generate_dataset(GenSpec(n=cfg.n_samples, grid_size=cfg.grid_size, seed=derived_int(cfg.seed, "data")))
    test = []
    if cfg.n_test:
        test = generate_dataset(GenSpec(n=cfg.n_test, grid_size=cfg.grid_size, seed=derived_int(cfg.seed, "test-data")))
    return data, test


def dataset_hash(data, test) -> str:
    h = hashlib.sha256()
    h.update(dumps(data).encode())
    h.update(b"\x00")
    h.update(dumps(test).encode())
    return h.hexdigest()


def load_data_dir(path: Path):
    train_file = path / "train.jsonl"
    if not train_file.exists():
        raise CliError("data", f"{train_file} not found")
    test_file = path / "test.jsonl"
    return load_dataset(train_file), (load_dataset(test_file) if test_file.exists() else [])


def prepare(cfg: TrainConfig, data_dir: str | None):
    data, test = load_data_dir(Path(data_dir)) if data_dir else make_datasets(cfg)
    labeled, unlabeled = split(data, SplitSpec(cfg.label_fraction, cfg.seed))
    return data, test, labeled, unlabeled


# ---------------------------------------------------------------- manifest


def _git_rev() -> str | None:
    try:
        res = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5, check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None


def write_manifest(out: Path, cfg: TrainConfig, data_dir: str | None, data_sha: str, command: str) -> dict:
    path = out / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(
        {
            "version": MANIFEST_VERSION,
            "package_version": __version__,
            "git": _git_rev(),
            "config": {k: v for k, v in asdict(cfg).items()},
            "data_dir": str(Path(data_dir).resolve()) if data_dir else None,
            "dataset_sha256": data_sha,
        }
    )
    manifest.setdefault("commands", [])
    if command not in manifest["commands"]:
        manifest["commands"].append(command)
    manifest["checkpoints"] = sorted(str(p.relative_to(out)) for p in (out / "checkpoints").glob("*.npz"))
    manifest["reports"] = sorted(p.name for p in out.glob("*reports.csv"))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path: Path) -> dict:
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise CliError("manifest", f"{path} not found")
    return json.loads(path.read_text())


def config_from_manifest(manifest: dict) -> TrainConfig:
    return config_from_mapping({k: str(v) for k, v in manifest["config"].items()})


# ---------------------------------------------------------------- commands


def _resolve(args) -> tuple[TrainConfig, Path, str | None]:
    data_dir = getattr(args, "data", None)
    if getattr(args, "manifest", None):
        manifest = read_manifest(Path(args.manifest))
        cfg = config_from_manifest(manifest)
        data_dir = data_dir or manifest.get("data_dir")
    elif args.config:
        cfg = load_config(args.config)
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.threads is not None:
        cfg = cfg.replace(threads=args.threads)
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    return cfg, out, data_dir


def _start(cfg: TrainConfig, out: Path, data_dir, command: str):
    out.mkdir(parents=True, exist_ok=True)
    sys.stderr.write(dump_config(cfg))
    save_config(cfg, out / "config.cfg")
    data, test, labeled, unlabeled = prepare(cfg, data_dir)
    sha = dataset_hash(data, test)
    old = out / MANIFEST
    if old.exists():
        prev = json.loads(old.read_text())
        if prev.get("dataset_sha256") not in (None, sha):
            raise CliError("manifest", f"{out} holds a run on a different dataset")
    write_manifest(out, cfg, data_dir, sha, command)
    log.info("data: %d labeled, %d unlabeled, %d test", len(labeled), len(unlabeled), len(test))
    return data, test, labeled, unlabeled, sha


def _load_burn_in(out: Path):
    path = trainer._checkpoint_path(out, 0)
    if not path.exists():
        return None
    params, mc, opt, meta = M.load_checkpoint(path)
    reports = trainer.read_reports(out / "reports.csv")
    return trainer.TrainState(params, opt, mc, int(meta["steps"])), reports[0]


def cmd_gen_data(args) -> int:
    cfg = TrainConfig(n_samples=args.n, n_test=args.n_test, grid_size=args.grid, seed=args.seed)
    data, test = make_datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out / "train.jsonl")
    if test:
        save_dataset(test, out / "test.jsonl")
    (out / "dataset.json").write_text(
        json.dumps({"n": args.n, "n_test": args.n_test, "grid": args.grid, "seed": args.seed,
                    "sha256": dataset_hash(data, test)}, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {len(data)} samples to {out / 'train.jsonl'}")
    return 0


def cmd_burn_in(args) -> int:
    cfg, out, data_dir = _resolve(args)
    data, test, labeled, unlabeled, sha = _start(cfg, out, data_dir, "burn-in")
    if _load_burn_in(out) is None:
        state, rep = trainer.run_burn_in(cfg, labeled, test)
        trainer._persist(out, state, 0, [rep], "reports.csv")
    write_manifest(out, cfg, data_dir, sha, "burn-in")
    rep = trainer.read_reports(out / "reports.csv")[0]
    print(f"burn-in: Acc@0.5 {rep.eval_acc:.2f} (quantized {rep.eval_acc_quant:.2f})")
    return 0


def cmd_run(args) -> int:
    cfg, out, data_dir = _resolve(args)
    data, test, labeled, unlabeled, sha = _start(cfg, out, data_dir, "run")
    _, reports = trainer.run_actress(cfg, labeled, unlabeled, test, out)
    write_manifest(out, cfg, data_dir, sha, "run")
    for r in reports:
        print(f"stage {r.stage} ({r.kind}): Acc@0.5 {r.eval_acc:.2f}")
    return 0


def cmd_baseline(args) -> int:
    cfg, out, data_dir = _resolve(args)
    data, test, labeled, unlabeled, sha = _start(cfg, out, data_dir, "baseline")
    _, reports = trainer.run_supervised_baseline(cfg, labeled, len(unlabeled), test, out, _load_burn_in(out))
    write_manifest(out, cfg, data_dir, sha, "baseline")
    for r in reports:
        print(f"phase {r.stage} ({r.kind}): Acc@0.5 {r.eval_acc:.2f}")
    return 0


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = read_manifest(run_dir)
    cfg = config_from_manifest(manifest)
    if args.threads is not None:
        cfg = cfg.replace(threads=args.threads)
    data, test, labeled, unlabeled = prepare(cfg, manifest.get("data_dir"))
    if dataset_hash(data, test) != manifest["dataset_sha256"]:
        raise CliError("manifest", "dataset does not match the manifest hash")
    burn = _load_burn_in(run_dir)
    if burn is None:
        raise CliError("run-dir", f"{run_dir} has no burn-in checkpoint; run `burn-in` or `run` first")
    state = burn[0]
    gold = GoldView(data)
    out = run_dir / "analysis"
    formats = ("csv", "png") if args.emit == "png" else ("csv",)
    if not (args.curves or args.ablation or args.dump_attribution):
        raise CliError("usage", "nothing to do; pass --curves, --ablation and/or --dump-attribution")

    if args.curves:
        pool = trainer.infer_unlabeled(state, unlabeled, cfg)
        rankers = evalreport.RANKERS + (("oracle",) if args.oracle else ())
        curve = evalreport.quality_curve(pool, gold, rankers, seed=cfg.seed)
        for path in evalreport.emit(curve, out, "quality_curve", formats):
            print(f"wrote {path}")
    if args.ablation:
        results = []
        for code in args.ablation.split(","):
            code = "" if code in ("none", "random") else code
            results.append(evalreport.ablation(cfg, code, state, labeled, unlabeled, test, gold))
            log.info("ablation %s: %.2f", code or "random", results[-1].eval_acc)
        for path in evalreport.emit(results, out, "ablation", formats):
            print(f"wrote {path}")
    if args.dump_attribution:
        path = dump_attribution(state, unlabeled[: args.dump_attribution], cfg, out / "attribution.csv")
        print(f"wrote {path}")
    return 0


def dump_attribution(state, samples, cfg: TrainConfig, path: Path) -> Path:
    """One CSV row per (sample, cell): sample_id,row,col,relevance."""
    path.parent.mkdir(parents=True, exist_ok=True)
    g = state.model_cfg.grid_size
    lines = ["sample_id,row,col,relevance"]
    for start in range(0, len(samples), cfg.eval_batch):
        chunk = samples[start : start + cfg.eval_batch]
        vis, tokens = encode_batch(chunk, state.model_cfg.t_max)
        out = M.forward(state.params, state.model_cfg, vis, tokens)
        M.grad_of_argmax_sum(state.params, out)
        maps, _ = attribution.attribution_maps(
            out.attention, out.attention_grad, g, cfg.relevance_normalize, out.visual_cells
        )
        for s, m in zip(chunk, maps):
            for r in range(g):
                for c in range(g):
                    lines.append(f"{s.id},{r},{c},{float(m[r, c])!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actress", description="Pseudo-label curation for tiny visual grounding.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=5000, help="number of samples")
    p.add_argument("--n-test", type=int, default=0, help="held-out test samples (default 0)")
    p.add_argument("--grid", type=int, default=8, help="grid size G")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    def common(p):
        p.add_argument("--config", help="INI config file with an [actress] section")
        p.add_argument("--manifest", help="reproduce the config and data of an existing run")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out-dir", help=f"run directory (else ${OUT_DIR_ENV}, else {DEFAULT_OUT_DIR})")
        p.add_argument("--threads", type=int, help="worker threads for scoring and evaluation")
        p.add_argument("--data", help="directory written by gen-data (default: generate from config)")

    for name, fn, text in (
        ("burn-in", cmd_burn_in, "supervised burn-in on the labeled split"),
        ("run", cmd_run, "burn-in followed by K active retraining stages"),
        ("baseline", cmd_baseline, "labeled-only training with the same step budget"),
    ):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("analyze", help="quality curves, metric ablations and attribution dumps")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--curves", action="store_true", help="pseudo-label quality curves after burn-in")
    p.add_argument("--oracle", action="store_true", help="add the true-IoU ranker to the curves")
    p.add_argument("--ablation", nargs="?", const="none,f,r,c,frc", default=None,
                   help="comma-separated metric subsets (letters from 'frc', 'none' for random)")
    p.add_argument("--emit", choices=["csv", "png"], default="csv", help="png also writes plots")
    p.add_argument("--dump-attribution", type=int, default=0, metavar="N",
                   help="write attribution grids for the first N unlabeled samples")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc.kind}: {exc}\n")
        return 1
    except (ValueError, OSError, trainer.TrainingDiverged) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
