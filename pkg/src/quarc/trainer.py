"""Full-precision pretraining and the coreset QAT loop.

Each QAT epoch ``t`` re-selects the coreset when ``t % R == 0`` (scoring the
whole training set with the current student), otherwise keeps the previous
one, then minimises ``KD + beta * CLC`` over coreset batches.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .coreset import ALL_METRICS, score_dataset, select_random, select_top
from .data import Dataset, epoch_order, iter_batches
from .errors import ConfigError, NumericError
from .losses import ce_loss, clc_loss, kd_loss, total_loss
from .models import Model, ModelDef, clone_as_quantized, save_checkpoint
from .quantization import SCALE_FLOOR

log = logging.getLogger(__name__)

METHODS = ("quarc", "random-coreset", "full-data")


@dataclass
class OptimizerConfig:
    name: str = "sgd"  # | "adam"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        self.betas = tuple(self.betas)


@dataclass
class RunConfig:
    bits_w: int = 2
    bits_a: Optional[int] = None
    S: float = 0.1
    R: int = 10
    T: int = 60
    beta: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=0.001))
    batch_size: int = 32
    seed: int = 0
    lr_schedule: str = "cosine"  # | "constant"
    metrics: tuple = ("evs", "ds", "res")
    clc: bool = True
    method: str = "quarc"
    normalize_res: bool = False
    learnable_scale: bool = True

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.metrics = tuple(sorted(self.metrics))
        if not 0 < self.S <= 1:
            raise ConfigError("S must be in (0, 1]")
        if not 1 <= self.R <= self.T:
            raise ConfigError("need 1 <= R <= T")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")
        if not self.metrics or not set(self.metrics) <= ALL_METRICS:
            raise ConfigError(f"metrics must be a non-empty subset of {sorted(ALL_METRICS)}")
        if self.bits_w < 2 or (self.bits_a is not None and self.bits_a < 2):
            raise ConfigError("bitwidths must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = list(self.metrics)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        return d


# Large-scale hyperparameter presets; momentum stays at 0.9.
CIFAR_PRESET = dict(
    T=200, R=50, beta=1e5, batch_size=256,
    optimizer=OptimizerConfig("sgd", lr=0.01, momentum=0.9, weight_decay=5e-4),
)
IMAGENET_PRESET = dict(
    T=120, R=10, beta=3e3, batch_size=128,
    optimizer=OptimizerConfig("adam", lr=1.25e-3, weight_decay=0.0),
)
PRESETS = {"cifar": CIFAR_PRESET, "imagenet": IMAGENET_PRESET}


@dataclass
class EpochMetrics:
    epoch: int
    kd: float
    clc: float
    total: float
    top1: float
    top5: float
    seconds: float
    coreset_size: int
    selected: bool
    backward_passes: int = 0
    train_forward_passes: int = 0
    teacher_forward_passes: int = 0
    selection_forward_passes: int = 0
    selection_seconds: float = 0.0
    lr: float = 0.0
    clc_terms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimisers


def _is_scale(name: str) -> bool:
    return name.endswith("_scale")


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """In-place SGD with heavy-ball momentum: ``v = mu*v + g + wd*w``, ``w -= lr*v``."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=p.dtype)
        if weight_decay and not _is_scale(name):
            g = g + weight_decay * p.data
        if momentum:
            buf = state.get(name)
            buf = g.copy() if buf is None else momentum * buf + g
            state[name] = buf
            g = buf
        p.data -= (lr * g).astype(p.dtype)
        if _is_scale(name):
            np.maximum(p.data, SCALE_FLOOR, out=p.data)


def adam_step(params: dict, grads: dict, state: dict, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    b1, b2 = betas
    step = state["_step"] = state.get("_step", 0) + 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if weight_decay and not _is_scale(name):
            g = g + weight_decay * p.data
        m, v = state.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[name] = (m, v)
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        if _is_scale(name):
            np.maximum(p.data, SCALE_FLOOR, out=p.data)


class Optimizer:
    def __init__(self, cfg: OptimizerConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.state: dict = {}

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.cfg.lr if lr is None else lr
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.cfg.name == "sgd":
            sgd_step(self.params, grads, self.state, lr, self.cfg.momentum, self.cfg.weight_decay)
        else:
            adam_step(self.params, grads, self.state, lr, self.cfg.betas, self.cfg.eps,
                      self.cfg.weight_decay)


def lr_at(cfg: OptimizerConfig, schedule: str, t: int, T_total: int) -> float:
    if schedule == "cosine":
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * t / T_total))
    return cfg.lr


# ---------------------------------------------------------------------------
# evaluation


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps the lower class index first among equal logits
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def evaluate(model: Model, data: Dataset, batch_size: int = 512) -> tuple[float, float]:
    if len(data) == 0:
        raise ConfigError("evaluation set is empty")
    calls = model.forward_calls
    logits = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            logits.append(model.forward(data.features[start:start + batch_size]).logits.data)
    model.forward_calls = calls
    logits = np.concatenate(logits)
    k = min(5, logits.shape[1])
    top1 = float(topk_correct(logits, data.labels, 1).mean())
    top5 = float(topk_correct(logits, data.labels, k).mean())
    return top1, top5


# ---------------------------------------------------------------------------
# training


def _check_finite(value: float, epoch: int, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{what} became non-finite at epoch {epoch}")


def pretrain_fp(mdef: ModelDef, train: Dataset, eval_data: Optional[Dataset] = None, epochs: int = 20,
                optimizer: Optional[OptimizerConfig] = None, batch_size: int = 32, seed: int = 0,
                checkpoint: Optional[Path] = None, dtype=np.float32) -> Model:
    """Train a full-precision model with cross-entropy."""
    optimizer = optimizer or OptimizerConfig(lr=0.05)
    model = Model.init(mdef, seed=seed, dtype=dtype)
    opt = Optimizer(optimizer, model.parameters())
    for epoch in range(epochs):
        losses = []
        for ids in iter_batches(epoch_order(np.arange(len(train)), seed, epoch), batch_size):
            out = model.forward(train.features[ids])
            try:
                loss = ce_loss(out.probs, train.labels[ids])
            except NumericError as exc:
                raise NumericError(f"pretraining diverged at epoch {epoch}: {exc}") from None
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        _check_finite(float(np.mean(losses)), epoch, "pretraining loss")
    if eval_data is not None and len(eval_data):
        top1, top5 = evaluate(model, eval_data)
        log.info("full-precision model: top1=%.4f top5=%.4f", top1, top5)
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return model


def run_quarc(fp: Model, train: Dataset, eval_data: Dataset, cfg: RunConfig,
              teacher: Optional[Model] = None, fixed_coreset: Optional[Sequence[int]] = None,
              init_student: Optional[Model] = None,
              metrics_path: Optional[Path] = None, checkpoint: Optional[Path] = None,
              run_name: Optional[str] = None) -> tuple[Model, list]:
    """Quantise ``fp`` and train it on adaptively selected coresets.

    ``fixed_coreset`` pins the coreset to the given train ids for every epoch.
    ``init_student`` starts from a copy of an existing quantized model instead
    of a fresh calibration of ``fp``.
    """
    if len(train) == 0:
        raise ConfigError("training set is empty")
    teacher = teacher if teacher is not None else fp
    bs = cfg.batch_size
    if init_student is not None:
        student = init_student.copy()
        student.bypass_quant = False
        student.forward_calls = 0
    else:
        student = clone_as_quantized(fp, cfg.bits_w, cfg.bits_a, calib=train.features[:bs],
                                     learnable_scale=cfg.learnable_scale)
    opt = Optimizer(cfg.optimizer, student.parameters())
    all_ids = np.arange(len(train))
    coreset: Optional[np.ndarray] = None
    metrics: list = []
    sink = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(metrics_path, "a")
    try:
        for t in range(cfg.T):
            start = time.perf_counter()
            selected = False
            sel_fwd = 0
            sel_secs = 0.0
            if fixed_coreset is not None:
                if coreset is None:
                    coreset = np.asarray(sorted(fixed_coreset), dtype=np.int64)
                    selected = True
            elif cfg.method == "full-data":
                if coreset is None:
                    coreset = all_ids
                    selected = True
            elif cfg.method == "random-coreset":
                if coreset is None:
                    coreset = np.asarray(select_random(train.labels, cfg.S, cfg.seed).selected_ids)
                    selected = True
            elif t % cfg.R == 0:
                s0 = time.perf_counter()
                before = student.forward_calls + teacher.forward_calls
                scores = score_dataset(student, teacher, train, t, cfg.T, bs, cfg.metrics,
                                       cfg.normalize_res)
                rnd = select_top(scores, cfg.S, t, cfg.T, labels=train.labels)
                sel_fwd = student.forward_calls + teacher.forward_calls - before
                sel_secs = time.perf_counter() - s0
                coreset = np.asarray(rnd.selected_ids, dtype=np.int64)
                selected = True
            if coreset is None or len(coreset) == 0:
                raise ConfigError(f"empty coreset at epoch {t}")

            lr = lr_at(cfg.optimizer, cfg.lr_schedule, t, cfg.T)
            kd_sum = clc_sum = tot_sum = 0.0
            terms_sum: dict = {}
            n_batches = 0
            s_before, t_before = student.forward_calls, teacher.forward_calls
            for ids in iter_batches(epoch_order(coreset, cfg.seed, t), bs):
                x = train.features[ids]
                with T.no_grad():
                    tout = teacher.forward(x)
                sout = student.forward(x)
                try:
                    kd = kd_loss(tout.probs, sout.probs)
                    if cfg.clc:
                        clc, terms = clc_loss(tout.taps, sout.taps)
                    else:
                        clc, terms = 0.0, {}
                    loss = total_loss(kd, clc, cfg.beta)
                except NumericError as exc:
                    raise NumericError(f"epoch {t}: {exc}") from None
                _check_finite(loss.item(), t, "training loss")
                opt.zero_grad()
                T.backward(loss)
                opt.step(lr)
                n_batches += 1
                kd_sum += kd.item()
                clc_val = clc.item() if isinstance(clc, T.Tensor) else float(clc)
                clc_sum += clc_val
                tot_sum += loss.item()
                for k, v in terms.items():
                    terms_sum[k] = terms_sum.get(k, 0.0) + v
            train_fwd = student.forward_calls - s_before
            teach_fwd = teacher.forward_calls - t_before
            elapsed = time.perf_counter() - start
            top1, top5 = evaluate(student, eval_data)
            m = EpochMetrics(
                epoch=t,
                kd=kd_sum / n_batches,
                clc=clc_sum / n_batches,
                total=tot_sum / n_batches,
                top1=top1,
                top5=top5,
                seconds=elapsed,
                coreset_size=int(len(coreset)),
                selected=selected,
                backward_passes=n_batches,
                train_forward_passes=train_fwd,
                teacher_forward_passes=teach_fwd,
                selection_forward_passes=sel_fwd,
                selection_seconds=sel_secs,
                lr=lr,
                clc_terms={k: v / n_batches for k, v in terms_sum.items()},
            )
            metrics.append(m)
            if sink is not None:
                rec = m.to_dict()
                if run_name is not None:
                    rec = {"run": run_name, "seed": cfg.seed, **rec}
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    if checkpoint is not None:
        save_checkpoint(student, checkpoint)
    return student, metrics


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v[:0]
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def loss_trend_fraction(losses: Sequence[float], window: int = 10) -> float:
    """Share of consecutive moving-average windows that do not increase."""
    ma = moving_average(losses, window)
    if len(ma) < 2:
        return 1.0
    return float(np.mean(np.diff(ma) <= 0))


def timing_metrics(metrics: Sequence[EpochMetrics]) -> dict:
    return {
        "total_seconds": float(sum(m.seconds for m in metrics)),
        "epochs": len(metrics),
        "backward_passes": int(sum(m.backward_passes for m in metrics)),
        "train_forward_passes": int(sum(m.train_forward_passes for m in metrics)),
        "selection_forward_passes": int(sum(m.selection_forward_passes for m in metrics)),
        "selection_rounds": int(sum(m.selected for m in metrics)),
    }


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
