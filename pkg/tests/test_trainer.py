import json
import math

import numpy as np
import pytest

from quarc.data import DataConfig, Dataset, SyntheticSpec, load_data
from quarc.errors import ConfigError, NumericError
from quarc.models import Model, ModelDef, load_checkpoint
from quarc.tensor import Tensor
from quarc.trainer import (PRESETS, EpochMetrics, OptimizerConfig, RunConfig, evaluate, loss_trend_fraction,
                           lr_at, moving_average, pretrain_fp, run_quarc, sgd_step, topk_correct)

from oracles import topk_bruteforce


@pytest.fixture(scope="module")
def small():
    train, ev = load_data(DataConfig(synthetic=SyntheticSpec(per_class=60, noise=0.8)))
    mdef = ModelDef("mlp", (2,), [8, 8], 4, quantize_first_last=True)
    fp = pretrain_fp(mdef, train, ev, epochs=10, seed=0)
    return fp, train, ev


# -- config -----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(S=0), dict(S=1.5), dict(R=0), dict(R=70, T=60), dict(beta=-1),
                                dict(method="other"), dict(metrics=()), dict(bits_w=1)])
def test_run_config_validation(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_optimizer_lr_positive():
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=0)


def test_presets_hold_expected_values():
    assert PRESETS["cifar"]["R"] == 50 and PRESETS["cifar"]["beta"] == 1e5
    assert PRESETS["imagenet"]["beta"] == 3e3


# -- optimiser --------------------------------------------------------------


def _p(v):
    return {"w": Tensor(np.asarray(v, dtype=np.float64))}


def test_sgd_plain_step():
    p = _p([1.0])
    sgd_step(p, {"w": np.array([1.0])}, {}, 0.1)
    assert p["w"].data.tolist() == [0.9]


def test_sgd_zero_grad_no_change():
    p = _p([1.0, -2.0])
    sgd_step(p, {"w": np.zeros(2)}, {}, 0.1, momentum=0.9)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_sgd_momentum_recurrence():
    p, state = _p([1.0, 2.0]), {}
    g1, g2 = np.array([0.5, -1.0]), np.array([0.25, 0.75])
    sgd_step(p, {"w": g1}, state, 0.1, momentum=0.9)
    sgd_step(p, {"w": g2}, state, 0.1, momentum=0.9)
    v1 = g1
    v2 = 0.9 * v1 + g2
    expect = np.array([1.0, 2.0]) - 0.1 * v1 - 0.1 * v2
    np.testing.assert_allclose(p["w"].data, expect, atol=1e-9)


def test_scale_floor_and_no_decay():
    p = {"fc1.w_scale": Tensor(np.array(0.01))}
    sgd_step(p, {"fc1.w_scale": np.array(5.0)}, {}, 1.0, weight_decay=0.5)
    assert p["fc1.w_scale"].data == 1e-8


def test_cosine_schedule():
    cfg = OptimizerConfig(lr=0.2)
    assert lr_at(cfg, "cosine", 0, 10) == pytest.approx(0.2)
    assert lr_at(cfg, "cosine", 5, 10) == pytest.approx(0.1)
    assert lr_at(cfg, "constant", 7, 10) == 0.2


# -- evaluation ---------------------------------------------------------------


def test_topk_matches_bruteforce():
    rng = np.random.default_rng(0)
    logits = rng.integers(0, 4, size=(50, 7)).astype(float)  # ties included
    labels = rng.integers(0, 7, size=50)
    for k in (1, 3, 5):
        assert topk_correct(logits, labels, k).mean() == topk_bruteforce(logits, labels, k)


def test_evaluate_constant_predictor():
    mdef = ModelDef("mlp", (2,), [3], 4)
    m = Model.init(mdef)
    for p in m.params.values():
        p.data[...] = 0
    m.params["fc2.bias"].data[0] = 1.0
    ds = Dataset(np.zeros((8, 2), np.float32), np.repeat(np.arange(4), 2), 4)
    top1, top5 = evaluate(m, ds)
    assert top1 == 0.25 and top5 == 1.0


# -- pretraining --------------------------------------------------------------


def test_pretrain_separable_blobs():
    train, ev = load_data(DataConfig(synthetic=SyntheticSpec(num_classes=2, per_class=500, noise=0.5)))
    fp = pretrain_fp(ModelDef("mlp", (2,), [16], 2), train, ev, epochs=20)
    assert evaluate(fp, ev)[0] >= 0.95


def test_pretrain_zero_epochs_is_init():
    train, _ = load_data(DataConfig(synthetic=SyntheticSpec(per_class=20)))
    mdef = ModelDef("mlp", (2,), [4], 4)
    m = pretrain_fp(mdef, train, epochs=0, seed=3)
    ref = Model.init(mdef, seed=3)
    assert all(np.array_equal(m.params[k].data, ref.params[k].data) for k in ref.params)


def test_pretrain_deterministic_checkpoints(tmp_path):
    train, _ = load_data(DataConfig(synthetic=SyntheticSpec(per_class=30)))
    mdef = ModelDef("mlp", (2,), [4], 4)
    for name in ("a", "b"):
        pretrain_fp(mdef, train, epochs=2, seed=1, checkpoint=tmp_path / f"{name}.npz")
    a, b = load_checkpoint(tmp_path / "a.npz"), load_checkpoint(tmp_path / "b.npz")
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_pretrain_divergence_aborts():
    train, _ = load_data(DataConfig(synthetic=SyntheticSpec(per_class=30)))
    with pytest.raises(NumericError):
        pretrain_fp(ModelDef("mlp", (2,), [8], 4), train, epochs=5, optimizer=OptimizerConfig(lr=1e30))


# -- QAT loop -----------------------------------------------------------------


def test_selection_schedule_and_accounting(small):
    fp, train, ev = small
    cfg = RunConfig(T=10, R=3, S=0.1, batch_size=8)
    _, metrics = run_quarc(fp, train, ev, cfg)
    assert [m.epoch for m in metrics if m.selected] == [0, 3, 6, 9]
    k = math.floor(0.1 * len(train))
    for m in metrics:
        assert m.coreset_size == k
        assert m.backward_passes == math.ceil(k / 8)
        assert m.train_forward_passes == m.teacher_forward_passes == math.ceil(k / 8)
        assert m.selection_forward_passes == (2 * math.ceil(len(train) / 8) if m.selected else 0)


def test_single_round_when_R_equals_T(small):
    fp, train, ev = small
    _, metrics = run_quarc(fp, train, ev, RunConfig(T=4, R=4))
    assert [m.selected for m in metrics] == [True, False, False, False]


def test_full_data_covers_everything(small):
    fp, train, ev = small
    _, metrics = run_quarc(fp, train, ev, RunConfig(T=2, R=1, method="full-data", batch_size=32))
    assert all(m.coreset_size == len(train) for m in metrics)
    assert all(m.backward_passes == math.ceil(len(train) / 32) for m in metrics)
    assert all(m.selection_forward_passes == 0 for m in metrics)


def test_coreset_frozen_between_rounds(small, monkeypatch):
    fp, train, ev = small
    import quarc.trainer as tr

    drawn = []
    real = tr.iter_batches

    def spy(ids, bs):
        drawn.append(sorted(np.asarray(ids).tolist()))
        return real(ids, bs)

    monkeypatch.setattr(tr, "iter_batches", spy)
    run_quarc(fp, train, ev, RunConfig(T=6, R=3))
    assert drawn[0] == drawn[1] == drawn[2]
    assert drawn[3] == drawn[4] == drawn[5]


def test_metrics_jsonl_and_determinism(small, tmp_path):
    fp, train, ev = small
    cfg = RunConfig(T=5, R=2, seed=4)
    _, m1 = run_quarc(fp, train, ev, cfg, metrics_path=tmp_path / "a.jsonl", run_name="x")
    _, m2 = run_quarc(fp, train, ev, cfg)
    strip = lambda ms: [{k: v for k, v in m.to_dict().items() if "seconds" not in k} for m in ms]
    assert strip(m1) == strip(m2)
    rows = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == list(range(5))
    assert rows[0]["run"] == "x" and rows[0]["seed"] == 4
    assert all(r["top1"] <= r["top5"] <= 1 for r in rows)


def test_clc_off_reports_zero(small):
    fp, train, ev = small
    _, metrics = run_quarc(fp, train, ev, RunConfig(T=2, R=1, clc=False))
    assert all(m.clc == 0.0 and m.kd == m.total for m in metrics)


def test_nan_aborts(small):
    fp, train, ev = small
    cfg = RunConfig(T=3, R=1, beta=1.0, optimizer=OptimizerConfig(lr=1e35, momentum=0))
    with pytest.raises(NumericError):
        run_quarc(fp, train, ev, cfg)


def test_moving_average_and_trend():
    assert moving_average(list(range(12)), 10).tolist() == [4.5, 5.5, 6.5]
    assert loss_trend_fraction(list(range(20, 0, -1))) == 1.0
    assert loss_trend_fraction(list(range(20))) == 0.0
    assert loss_trend_fraction([1.0] * 5) == 1.0


def test_epoch_metrics_invariant():
    m = EpochMetrics(0, 1, 0, 1, 0.5, 0.9, 0.1, 10, True)
    assert m.top1 <= m.top5 <= 1
