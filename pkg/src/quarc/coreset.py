"""Per-sample selection scores and top-S% coreset selection.

The combined score at epoch ``t`` of ``T`` is
``a(t) * evs + (1 - a(t)) * ds + res`` with ``a(t) = cos(t * pi / (2T))``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError
from .losses import EPS

log = logging.getLogger(__name__)

ALL_METRICS = frozenset({"evs", "ds", "res"})
SCORE_HEADER = ("sample_id", "evs", "ds", "res", "combined", "epoch")


@dataclass
class SampleScore:
    sample_id: int
    evs: float
    ds: float
    res: float
    combined: float
    epoch: int


@dataclass
class SelectionRound:
    epoch: int
    fraction: float
    alpha: float
    selected_ids: list
    scores: list = field(default_factory=list, repr=False)


def _vec(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64)


def score_evs(p_q, y: int) -> float:
    """L2 distance between the student distribution and the one-hot label."""
    p = _vec(p_q)
    if not 0 <= y < p.shape[-1]:
        raise ContractError(f"label {y} out of range for {p.shape[-1]} classes")
    onehot = np.zeros_like(p)
    onehot[y] = 1.0
    return float(np.linalg.norm(p - onehot))


def score_ds(p_q, p_t) -> float:
    return float(np.linalg.norm(_vec(p_q) - _vec(p_t)))


def score_res(p_q, p_f) -> float:
    """KL(p_q || p_f) with eps inside the log ratio."""
    q, f = _vec(p_q), _vec(p_f)
    return float(np.sum(q * np.log((q + EPS) / (f + EPS))))


def alpha(t: float, T_total: int) -> float:
    if T_total <= 0:
        raise ConfigError("total epochs T must be positive")
    if not 0 <= t <= T_total:
        raise ContractError(f"epoch {t} outside [0, {T_total}]")
    return math.cos(t * math.pi / (2 * T_total))


def combine(evs, ds, res, t: float, T_total: int, metrics: Iterable[str] = ALL_METRICS):
    """Annealed combination; scalars or equal-length arrays.

    With only one of ``evs``/``ds`` in ``metrics`` that term enters unweighted.
    """
    a = alpha(t, T_total)
    m = set(metrics)
    if not m or not m <= ALL_METRICS:
        raise ConfigError(f"selection metrics must be a non-empty subset of {sorted(ALL_METRICS)}")
    out = 0.0
    if "evs" in m and "ds" in m:
        out = a * np.asarray(evs) + (1.0 - a) * np.asarray(ds)
    elif "evs" in m:
        out = np.asarray(evs, dtype=np.float64)
    elif "ds" in m:
        out = np.asarray(ds, dtype=np.float64)
    if "res" in m:
        out = out + np.asarray(res)
    out = np.asarray(out, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def batch_scores(p_q: np.ndarray, p_t: np.ndarray, labels: np.ndarray) -> tuple:
    """Vectorised evs/ds/res over rows, float64."""
    q = p_q.astype(np.float64)
    t = p_t.astype(np.float64)
    onehot = np.zeros_like(q)
    onehot[np.arange(len(labels)), labels] = 1.0
    evs = np.linalg.norm(q - onehot, axis=1)
    ds = np.linalg.norm(q - t, axis=1)
    res = np.sum(q * np.log((q + EPS) / (t + EPS)), axis=1)
    return evs, ds, res


def model_probs(model, features: np.ndarray, batch_size: int) -> np.ndarray:
    """Forward-only softmax outputs, one model call per batch."""
    out = []
    with T.no_grad():
        for start in range(0, len(features), batch_size):
            out.append(model.forward(features[start:start + batch_size]).probs.data)
    return np.concatenate(out)


def score_dataset(student, teacher, data, t: int, T_total: int, batch_size: int = 32,
                  metrics: Iterable[str] = ALL_METRICS, normalize_res: bool = False) -> list:
    """Score every sample with one batched forward pass per model."""
    if len(data) == 0:
        raise ConfigError("cannot score an empty dataset")
    p_q = model_probs(student, data.features, batch_size)
    p_t = model_probs(teacher, data.features, batch_size)
    evs, ds, res = batch_scores(p_q, p_t, data.labels)
    res_used = res
    if normalize_res:
        span = res.max() - res.min()
        res_used = (res - res.min()) / span if span > 0 else np.zeros_like(res)
    comb = combine(evs, ds, res_used, t, T_total, metrics)
    comb = np.broadcast_to(comb, evs.shape)
    return [
        SampleScore(int(i), float(e), float(d), float(r), float(c), int(t))
        for i, e, d, r, c in zip(data.ids, evs, ds, res, comb)
    ]


def coreset_size(n: int, fraction: float) -> int:
    return max(1, math.floor(fraction * n))


def select_top(scores: Sequence[SampleScore], fraction: float, epoch: Optional[int] = None,
               T_total: Optional[int] = None, labels: Optional[np.ndarray] = None) -> SelectionRound:
    """Highest combined scores first; ties go to the lower sample id."""
    if not 0 < fraction <= 1:
        raise ConfigError("coreset fraction must be in (0, 1]")
    k = coreset_size(len(scores), fraction)
    ranked = sorted(scores, key=lambda s: (-s.combined, s.sample_id))
    chosen = sorted(s.sample_id for s in ranked[:k])
    t = epoch if epoch is not None else (scores[0].epoch if scores else 0)
    a = alpha(t, T_total) if T_total else float("nan")
    if labels is not None:
        warn_missing_classes(chosen, labels)
    return SelectionRound(t, fraction, a, chosen, list(scores))


def warn_missing_classes(ids, labels: np.ndarray) -> list:
    present = set(np.asarray(labels)[np.asarray(ids, dtype=np.int64)].tolist())
    missing = sorted(set(np.unique(labels).tolist()) - present)
    if missing:
        log.warning("coreset has no samples of classes %s", missing)
    return missing


def select_random(labels: np.ndarray, fraction: float, seed: int, epoch: int = 0) -> SelectionRound:
    """Class-stratified random coreset of the same size as :func:`select_top`."""
    if not 0 < fraction <= 1:
        raise ConfigError("coreset fraction must be in (0, 1]")
    labels = np.asarray(labels)
    n = len(labels)
    k = coreset_size(n, fraction)
    rng = np.random.default_rng([seed, epoch, 7])
    chosen, leftover = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        take = math.floor(fraction * len(idx))
        chosen.extend(idx[:take].tolist())
        leftover.extend(idx[take:].tolist())
    short = k - len(chosen)
    if short > 0:
        chosen.extend(rng.choice(np.asarray(leftover), size=short, replace=False).tolist())
    return SelectionRound(epoch, fraction, float("nan"), sorted(chosen[:k]))


def write_scores_csv(scores: Sequence[SampleScore], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_HEADER)
        for s in scores:
            w.writerow([s.sample_id, repr(s.evs), repr(s.ds), repr(s.res), repr(s.combined), s.epoch])
    return path


def read_scores_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_HEADER:
            raise FormatError(f"{path}: expected header {','.join(SCORE_HEADER)}")
        return [
            SampleScore(int(r["sample_id"]), float(r["evs"]), float(r["ds"]), float(r["res"]),
                        float(r["combined"]), int(r["epoch"]))
            for r in reader
        ]
