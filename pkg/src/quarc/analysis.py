"""Diagnostics: RES/accuracy rank correlation, per-tap KL, timing, ablation summaries."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .coreset import batch_scores, coreset_size, model_probs
from .data import Dataset
from .errors import ConfigError, ContractError
from .losses import kl_rows
from .models import Model
from .trainer import RunConfig, loss_trend_fraction, run_quarc, timing_metrics


# ---------------------------------------------------------------------------
# rank correlation


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("spearman needs two equal-length 1-D samples")
    if len(x) < 2:
        raise ContractError("spearman needs at least two points")
    return _pearson(rankdata(x), rankdata(y))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return float("nan")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def permutation_pvalue(x, y, n_perm: int = 10_000, seed: int = 0) -> float:
    """Two-sided permutation p-value for Spearman's rho."""
    rx = rankdata(np.asarray(x, dtype=np.float64))
    ry = rankdata(np.asarray(y, dtype=np.float64))
    obs = abs(_pearson(rx, ry))
    if math.isnan(obs):
        return 1.0
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        r = _pearson(rx, rng.permutation(ry))
        if not math.isnan(r) and abs(r) >= obs - 1e-12:
            hits += 1
    return (hits + 1) / (n_perm + 1)


@dataclass
class CorrelationReport:
    bucket_res: list
    bucket_top1: list
    rho: float
    p_value: float
    per_seed_top1: list = field(default_factory=list)

    @property
    def reportable(self) -> bool:
        return len(self.bucket_res) >= 5

    def rows(self) -> list:
        return [
            {"bucket": i, "mean_res": r, "top1": a}
            for i, (r, a) in enumerate(zip(self.bucket_res, self.bucket_top1))
        ]


def res_scores(student: Model, fp: Model, data: Dataset, batch_size: int = 256) -> np.ndarray:
    p_q = model_probs(student, data.features, batch_size)
    p_f = model_probs(fp, data.features, batch_size)
    return batch_scores(p_q, p_f, data.labels)[2]


def quantile_buckets(res: np.ndarray, buckets: int, fraction: float) -> list:
    """Equal-size id bands spread evenly across the RES-sorted order."""
    n = len(res)
    size = coreset_size(n, fraction)
    order = np.lexsort((np.arange(n), res))  # ascending RES, ties by id
    starts = np.round(np.linspace(0, n - size, buckets)).astype(int)
    return [np.sort(order[s:s + size]) for s in starts]


def correlate(fp: Model, train: Dataset, eval_data: Dataset, cfg: RunConfig, buckets: int = 8,
              fraction: float = 0.05, seeds: Sequence[int] = (0,), q_init: Optional[Model] = None,
              n_perm: int = 10_000) -> CorrelationReport:
    """Train one student per RES band and rank-correlate band RES with final top-1."""
    if buckets < 5:
        raise ConfigError("need at least 5 buckets for a reportable correlation")
    if coreset_size(len(train), fraction) < cfg.batch_size:
        raise ConfigError(
            f"S*N = {coreset_size(len(train), fraction)} is below the batch size {cfg.batch_size}"
        )
    if q_init is None:
        from .models import clone_as_quantized

        q_init = clone_as_quantized(fp, cfg.bits_w, cfg.bits_a, calib=train.features[:cfg.batch_size],
                                    learnable_scale=cfg.learnable_scale)
    res = res_scores(q_init, fp, train)
    bands = quantile_buckets(res, buckets, fraction)
    per_seed = []
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        accs = []
        for ids in bands:
            _, metrics = run_quarc(fp, train, eval_data, run_cfg, fixed_coreset=ids, init_student=q_init)
            accs.append(metrics[-1].top1)
        per_seed.append(accs)
    top1 = np.mean(np.asarray(per_seed), axis=0)
    mean_res = [float(res[ids].mean()) for ids in bands]
    rho = spearman(mean_res, top1)
    p = permutation_pvalue(mean_res, top1, n_perm, seed=0)
    return CorrelationReport(mean_res, top1.tolist(), rho, p, per_seed)


# ---------------------------------------------------------------------------
# intermediate-layer KL


def layer_kl(fp: Model, q: Model, data: Dataset, taps: Optional[Sequence[str]] = None,
             batch_size: int = 256) -> dict:
    """Mean KL(Q || F) between softmax-normalised taps, one entry per tap."""
    if fp.mdef.to_dict() != q.mdef.to_dict():
        raise ContractError("checkpoints do not share a model definition")
    taps = list(taps) if taps is not None else list(fp.mdef.taps)
    missing = [t for t in taps if t not in fp.mdef.taps]
    if missing:
        raise ContractError(f"taps {missing} are not captured by this model")
    sums = {t: 0.0 for t in taps}
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            x = data.features[start:start + batch_size]
            of, oq = fp.forward(x), q.forward(x)
            for t in taps:
                kl = kl_rows(T.softmax(Tensor64(oq.taps[t])), T.softmax(Tensor64(of.taps[t])))
                sums[t] += float(kl.data.sum(dtype=np.float64))
    return {t: sums[t] / len(data) for t in taps}


def Tensor64(t) -> T.Tensor:
    return T.Tensor(t.data.astype(np.float64))


# ---------------------------------------------------------------------------
# timing


def bench(fp: Model, train: Dataset, eval_data: Dataset, cfg: RunConfig,
          fractions: Sequence[float] = (0.01, 0.05, 0.1)) -> list:
    """Time full-data QAT against coreset QAT at each fraction."""
    rows = []
    variants = [("full-data", replace(cfg, method="full-data", S=1.0))]
    variants += [(f"S={f:g}", replace(cfg, method="quarc", S=f)) for f in fractions]
    for name, vcfg in variants:
        _, metrics = run_quarc(fp, train, eval_data, vcfg)
        tm = timing_metrics(metrics)
        rows.append({
            "variant": name,
            "S": vcfg.S,
            "epochs": tm["epochs"],
            "total_seconds": tm["total_seconds"],
            "seconds_per_epoch": tm["total_seconds"] / max(tm["epochs"], 1),
            "backward_passes": tm["backward_passes"],
            "train_forward_passes": tm["train_forward_passes"],
            "selection_forward_passes": tm["selection_forward_passes"],
            "selection_rounds": tm["selection_rounds"],
            "final_top1": metrics[-1].top1,
        })
    full = rows[0]
    for r in rows:
        r["time_ratio"] = r["total_seconds"] / full["total_seconds"]
        r["backward_ratio"] = r["backward_passes"] / full["backward_passes"]
    return rows


# ---------------------------------------------------------------------------
# summaries


SUMMARY_FIELDS = ["name", "seed", "top1", "top5", "total", "kd", "clc", "loss_trend"]


def run_summary_row(name: str, seed: int, metrics: list) -> dict:
    last = metrics[-1]
    return {
        "name": name,
        "seed": seed,
        "top1": last.top1,
        "top5": last.top5,
        "total": last.total,
        "kd": last.kd,
        "clc": last.clc,
        "loss_trend": loss_trend_fraction([m.total for m in metrics]),
    }


def aggregate(rows: Sequence[dict], numeric=("top1", "top5", "total", "kd", "clc", "loss_trend")) -> list:
    """Mean and sample std per run name, in first-seen order."""
    names = list(dict.fromkeys(r["name"] for r in rows))
    out = []
    for n in names:
        grp = [r for r in rows if r["name"] == n]
        agg = {"name": n, "n": len(grp)}
        for k in numeric:
            v = np.asarray([r[k] for r in grp], dtype=np.float64)
            agg[f"{k}_mean"] = float(v.mean())
            agg[f"{k}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append(agg)
    return out


def write_csv(rows: Sequence[dict], path, fields: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})
    return path


def format_table(rows: Sequence[dict], fields: Optional[Sequence[str]] = None) -> str:
    if not rows:
        return ""
    fields = list(fields or rows[0].keys())

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(f, "")) for f in fields] for r in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) for i, f in enumerate(fields)]
    lines = ["  ".join(f.ljust(w) for f, w in zip(fields, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def summary_table(rows: Sequence[dict]) -> tuple[list, str]:
    """Per-run rows followed by ``name (mean±std)`` aggregate rows, plus aligned text."""
    agg = aggregate(rows)
    text_rows = [dict(r) for r in rows]
    for a in agg:
        text_rows.append({
            "name": a["name"],
            "seed": "mean±std",
            **{k: f"{a[k + '_mean']:.4f}±{a[k + '_std']:.4f}" for k in SUMMARY_FIELDS[2:]},
        })
    return agg, format_table(text_rows, SUMMARY_FIELDS)
