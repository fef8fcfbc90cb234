"""Distillation, cascaded layer correction, and cross-entropy losses.

Every loss reduces over the batch by mean. Teacher inputs are detached.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

EPS = 1e-12

CIFAR_BETA = 1e5
IMAGENET_BETA = 3e3


@dataclass
class LossReport:
    kd: float
    clc: float
    total: float
    clc_terms: dict = field(default_factory=dict)


def _check_probs(p: np.ndarray, what: str) -> None:
    if p.ndim != 2:
        raise ContractError(f"{what}: expected [B, M] probabilities, got {p.shape}")
    dev = np.abs(p.sum(axis=1, dtype=np.float64) - 1.0)
    if dev.size and dev.max() > 1e-3:
        raise ContractError(f"{what}: rows do not sum to 1 (max deviation {dev.max():.3g})")


def _const(t) -> Tensor:
    return Tensor(t.data if isinstance(t, Tensor) else np.asarray(t))


def kd_loss(p_teacher, p_student: Tensor) -> Tensor:
    """Mean over the batch of ``-sum_m p_T log(p_Q + eps)``."""
    pt = _const(p_teacher)
    _check_probs(pt.data, "kd_loss teacher")
    _check_probs(p_student.data, "kd_loss student")
    if pt.shape != p_student.shape:
        raise ContractError(f"kd_loss: shapes {pt.shape} vs {p_student.shape}")
    pt = Tensor(pt.data.astype(p_student.dtype, copy=False))
    ce = T.sum(T.mul(pt, T.log(p_student, EPS)), axis=-1)
    return T.mean(ce) * -1.0


def kl_rows(q: Tensor, f: Tensor) -> Tensor:
    """Per-row ``sum_i q_i log((q_i + eps) / (f_i + eps))``; ``f`` is constant."""
    lf = np.log(f.data + np.asarray(EPS, dtype=f.dtype))
    diff = T.sub(T.log(q, EPS), Tensor(lf.astype(q.dtype, copy=False)))
    return T.sum(T.mul(q, diff), axis=-1)


def clc_loss(taps_fp: dict, taps_q: dict) -> tuple[Tensor, dict]:
    """Sum over taps of the batch-mean KL(Q || F) between softmax-normalised taps."""
    if list(taps_fp) != list(taps_q):
        raise ContractError(f"clc_loss: tap sets differ: {list(taps_fp)} vs {list(taps_q)}")
    total = None
    terms = {}
    for name, tq in taps_q.items():
        tf = taps_fp[name]
        if tf.shape != tq.shape:
            raise ContractError(f"clc_loss: tap {name!r} shapes {tf.shape} vs {tq.shape}")
        q = T.softmax(tq)
        f = T.softmax(_const(tf))
        term = T.mean(kl_rows(q, f))
        terms[name] = term.item()
        total = term if total is None else T.add(total, term)
    if total is None:
        total = Tensor(np.zeros((), dtype=np.float32))
    return total, terms


def total_loss(kd: Tensor, clc, beta: float) -> Tensor:
    if beta < 0:
        raise ContractError("beta must be non-negative")
    return T.add(kd, T.mul(clc, float(beta)))


def ce_loss(probs: Tensor, labels) -> Tensor:
    """Mean ``-log(p[b, y_b] + eps)``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, M = probs.shape
    if labels.shape != (B,):
        raise ContractError(f"ce_loss: {labels.shape[0] if labels.ndim else 0} labels for batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise ContractError("ce_loss: label out of range")
    onehot = np.zeros((B, M), dtype=probs.dtype)
    onehot[np.arange(B), labels] = 1
    return kd_loss(Tensor(onehot), probs)
