"""Command-line front end.

Every subcommand reads an optional TOML config, writes its artifacts to
``--out`` and refuses to reuse a non-empty output directory unless
``--force`` is given. Exit codes: 0 ok, 2 config, 3 data/format, 4 numeric.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analysis import SUMMARY_FIELDS, bench, correlate, format_table, layer_kl, run_summary_row, summary_table, write_csv
from .config import ExperimentConfig, load_config
from .coreset import score_dataset, write_scores_csv
from .data import load_data
from .errors import ConfigError, QuarcError
from .models import Model, clone_as_quantized, load_checkpoint
from .trainer import evaluate, pretrain_fp, run_quarc

log = logging.getLogger("quarc")

FP_NAME = "fp.npz"
STUDENT_NAME = "student.npz"
ARTIFACT_SUFFIXES = {".npz", ".jsonl", ".csv", ".txt", ".json"}

DEFAULT_PLAN = [
    ("baseline", dict(metrics=("evs", "ds"), clc=False)),
    ("+res", dict(metrics=("evs", "ds", "res"), clc=False)),
    ("+clc", dict(metrics=("evs", "ds"), clc=True)),
    ("+res+clc", dict(metrics=("evs", "ds", "res"), clc=True)),
]


# ---------------------------------------------------------------------------
# helpers


def prepare_out(out: Path, force: bool) -> Path:
    """Create ``out``; a non-empty directory needs ``force``, which clears old artifacts."""
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        for p in sorted(out.rglob("*"), reverse=True):
            if p.is_file() and p.suffix in ARTIFACT_SUFFIXES:
                p.unlink()
            elif p.is_dir() and not any(p.iterdir()):
                p.rmdir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def require_checkpoint(path: Optional[str], what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} checkpoint path is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} checkpoint not found: {p}")
    return p


def _load_fp(path: Optional[str]) -> Model:
    return load_checkpoint(require_checkpoint(path, "fp"))


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _settings(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.run = replace(cfg.run, seed=args.seed)
    return cfg


def _seeds(cfg: ExperimentConfig, args, section: Optional[dict] = None) -> list:
    if getattr(args, "seeds", None):
        return list(args.seeds)
    if args.seed is not None:
        return [args.seed]
    if section and "seeds" in section:
        return list(section["seeds"])
    return list(cfg.seeds)


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(cfg: ExperimentConfig, args, out: Path) -> int:
    train, ev = load_data(cfg.data)
    mdef = cfg.model_def(train)
    pc = cfg.pretrain
    model = pretrain_fp(mdef, train, ev, epochs=pc.epochs, optimizer=pc.optimizer,
                        batch_size=pc.batch_size, seed=cfg.seed, checkpoint=out / FP_NAME)
    top1, top5 = evaluate(model, ev)
    _dump_json({"top1": top1, "top5": top5, "seed": cfg.seed, "model": mdef.to_dict()}, out / "pretrain.json")
    print(f"fp checkpoint {out / FP_NAME}: top1={top1:.4f} top5={top5:.4f}")
    return 0


def cmd_train(cfg: ExperimentConfig, args, out: Path) -> int:
    fp = _load_fp(args.fp)
    train, ev = load_data(cfg.data)
    run = cfg.run
    _dump_json(run.to_dict(), out / "run_config.json")
    _, metrics = run_quarc(fp, train, ev, run, metrics_path=out / "metrics.jsonl",
                           checkpoint=out / STUDENT_NAME, run_name="train")
    row = run_summary_row("train", run.seed, metrics)
    write_csv([row], out / "summary.csv", SUMMARY_FIELDS)
    text = format_table([row], SUMMARY_FIELDS)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def _plan(cfg: ExperimentConfig) -> list:
    if cfg.plan:
        return cfg.plan_configs()
    return [(name, replace(cfg.run, **kw)) for name, kw in DEFAULT_PLAN]


def cmd_ablate(cfg: ExperimentConfig, args, out: Path) -> int:
    fp = _load_fp(args.fp)
    plan = _plan(cfg)  # validated before any data loading or training
    seeds = _seeds(cfg, args)
    train, ev = load_data(cfg.data)
    rows = []
    runs_dir = out / "runs"
    for name, run in plan:
        for seed in seeds:
            tag = f"{_slug(name)}-s{seed}"
            _, metrics = run_quarc(fp, train, ev, replace(run, seed=seed),
                                   metrics_path=runs_dir / f"{tag}.jsonl", run_name=name)
            rows.append(run_summary_row(name, seed, metrics))
    agg, text = summary_table(rows)
    write_csv(rows, out / "summary.csv", SUMMARY_FIELDS)
    write_csv(agg, out / "aggregate.csv")
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def cmd_correlate(cfg: ExperimentConfig, args, out: Path) -> int:
    fp = _load_fp(args.fp)
    sec = cfg.correlate
    buckets = args.buckets if args.buckets is not None else int(sec.get("buckets", 8))
    fraction = args.fraction if args.fraction is not None else float(sec.get("S", 0.05))
    seeds = _seeds(cfg, args, sec)
    if buckets < 5:
        raise ConfigError("need at least 5 buckets for a reportable correlation")
    q_init = load_checkpoint(require_checkpoint(args.q, "q")) if args.q else None
    train, ev = load_data(cfg.data)
    rep = correlate(fp, train, ev, cfg.run, buckets=buckets, fraction=fraction, seeds=seeds,
                    q_init=q_init, n_perm=int(sec.get("permutations", 10_000)))
    write_csv(rep.rows(), out / "correlate.csv", ["bucket", "mean_res", "top1"])
    rho = None if math.isnan(rep.rho) else rep.rho
    _dump_json({"rho": rho, "p_value": rep.p_value, "buckets": buckets, "S": fraction,
                "seeds": seeds, "per_seed_top1": rep.per_seed_top1}, out / "correlate.json")
    text = format_table(rep.rows()) + f"spearman rho = {rep.rho:.4f}  permutation p = {rep.p_value:.4g}\n"
    (out / "correlate.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_layer_kl(cfg: ExperimentConfig, args, out: Path) -> int:
    fp = _load_fp(args.fp)
    q = load_checkpoint(require_checkpoint(args.q, "q"))
    _, ev = load_data(cfg.data)
    kl = layer_kl(fp, q, ev, args.taps)
    rows = [{"tap": t, "kl": v} for t, v in kl.items()]
    write_csv(rows, out / "layer_kl.csv", ["tap", "kl"])
    text = format_table(rows)
    (out / "layer_kl.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_bench(cfg: ExperimentConfig, args, out: Path) -> int:
    fp = _load_fp(args.fp)
    fractions = args.fractions or cfg.bench.get("fractions", [0.01, 0.05, 0.1])
    train, ev = load_data(cfg.data)
    rows = bench(fp, train, ev, cfg.run, fractions)
    write_csv(rows, out / "bench.csv")
    fields = ["variant", "S", "total_seconds", "seconds_per_epoch", "backward_passes",
              "selection_forward_passes", "time_ratio", "backward_ratio", "final_top1"]
    text = format_table(rows, fields)
    (out / "bench.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_scores_dump(cfg: ExperimentConfig, args, out: Path) -> int:
    fp = _load_fp(args.fp)
    train, _ = load_data(cfg.data)
    run = cfg.run
    if args.q:
        q = load_checkpoint(require_checkpoint(args.q, "q"))
    else:
        q = clone_as_quantized(fp, run.bits_w, run.bits_a, calib=train.features[:run.batch_size],
                               learnable_scale=run.learnable_scale)
    scores = score_dataset(q, fp, train, args.epoch, run.T, run.batch_size, run.metrics, run.normalize_res)
    write_scores_csv(scores, out / "scores.csv")
    print(f"wrote {len(scores)} scores to {out / 'scores.csv'}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "correlate": cmd_correlate,
    "layer-kl": cmd_layer_kl,
    "bench": cmd_bench,
    "scores-dump": cmd_scores_dump,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the run seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="overwrite artifacts in a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="quarc", parents=[common],
                                description="Coreset quantization-aware training on toy models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="train the full-precision model")

    sp = sub.add_parser("train", parents=[common], help="one coreset QAT run")
    sp.add_argument("--fp", help="full-precision checkpoint")

    sp = sub.add_parser("ablate", parents=[common], help="run every plan entry over the seeds")
    sp.add_argument("--fp", help="full-precision checkpoint")
    sp.add_argument("--seeds", type=int, nargs="+")

    sp = sub.add_parser("correlate", parents=[common], help="RES vs accuracy rank correlation")
    sp.add_argument("--fp", help="full-precision checkpoint")
    sp.add_argument("--q", help="quantized starting checkpoint (default: calibrated from --fp)")
    sp.add_argument("--buckets", type=int)
    sp.add_argument("--fraction", "-S", type=float)
    sp.add_argument("--seeds", type=int, nargs="+")

    sp = sub.add_parser("layer-kl", parents=[common], help="per-tap KL between two checkpoints")
    sp.add_argument("--fp", help="full-precision checkpoint")
    sp.add_argument("--q", help="quantized checkpoint")
    sp.add_argument("--taps", nargs="+")

    sp = sub.add_parser("bench", parents=[common], help="coreset vs full-data timing")
    sp.add_argument("--fp", help="full-precision checkpoint")
    sp.add_argument("--fractions", type=float, nargs="+")

    sp = sub.add_parser("scores-dump", parents=[common], help="write per-sample selection scores")
    sp.add_argument("--fp", help="full-precision checkpoint")
    sp.add_argument("--q", help="quantized checkpoint (default: calibrated from --fp)")
    sp.add_argument("--epoch", type=int, default=0)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("force", False), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _settings(load_config(args.config), args)
        out = prepare_out(Path(args.out or f"runs/{args.command}"), args.force)
        return COMMANDS[args.command](cfg, args, out)
    except QuarcError as exc:
        print(f"quarc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
