import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quarc import tensor as T
from quarc.errors import ConfigError, ContractError
from quarc.quantization import (ACTIVATION, WEIGHT, QuantSpec, fake_quant, init_scale, lsq_grad_factor,
                                make_spec, quant_bounds, quantize_backward, quantize_forward)
from quarc.tensor import Tensor

from oracles import fake_quant_scalar, lsq_scale_grad_loop


def spec(bits, s, mode=WEIGHT, g=1.0, dtype=np.float64):
    return QuantSpec(bits, mode, Tensor(np.asarray(s, dtype=dtype)), g)


def test_bounds():
    assert quant_bounds(2, WEIGHT) == (2, 1)
    assert quant_bounds(8, WEIGHT) == (128, 127)
    assert quant_bounds(4, ACTIVATION) == (0, 15)
    with pytest.raises(ConfigError):
        quant_bounds(1, WEIGHT)


def test_forward_examples():
    sp = spec(2, 0.5)
    assert quantize_forward(np.array([0.6]), sp).tolist() == [0.5]
    assert quantize_forward(np.array([-5.0]), sp).tolist() == [-1.0]
    assert quantize_forward(np.array([0.0]), spec(4, 0.37)).tolist() == [0.0]


def test_rounding_is_half_to_even():
    sp = spec(8, 1.0)
    out = quantize_forward(np.array([0.5, 1.5, 2.5, -0.5, -1.5]), sp)
    assert out.tolist() == [0.0, 2.0, 2.0, 0.0, -2.0]


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for bits in (2, 3, 4, 8):
        x = rng.normal(scale=2, size=500)
        s = 0.3
        out = quantize_forward(x, spec(bits, s))
        qn, qp = quant_bounds(bits, WEIGHT)
        ref = [fake_quant_scalar(v, s, qn, qp) for v in x]
        np.testing.assert_array_equal(out, ref)


def test_backward_examples():
    sp = spec(2, 1.0)
    gx, _ = quantize_backward(np.array([1.0]), np.array([0.3]), sp)
    assert gx.tolist() == [1.0]
    gx, _ = quantize_backward(np.array([1.0]), np.array([10.0]), sp)
    assert gx.tolist() == [0.0]


def test_scale_grad_matches_scalar_loop():
    rng = np.random.default_rng(1)
    for bits, mode in [(2, WEIGHT), (3, WEIGHT), (4, ACTIVATION), (8, WEIGHT)]:
        x = rng.normal(scale=1.5, size=(20, 7))
        up = rng.normal(size=x.shape)
        qn, qp = quant_bounds(bits, mode)
        g = lsq_grad_factor(x.size, qp)
        _, gs = quantize_backward(up, x, spec(bits, 0.4, mode, g))
        assert gs == pytest.approx(lsq_scale_grad_loop(up, x, 0.4, qn, qp, g), abs=1e-9)


def test_backward_shape_mismatch():
    with pytest.raises(ContractError):
        quantize_backward(np.ones(3), np.ones(4), spec(2, 1.0))


def test_init_scale_examples():
    assert init_scale(np.array([1.0, -1.0, 1.0, -1.0]), 1) == 2.0
    assert init_scale(np.zeros(10), 1) == 1e-8
    v = np.random.default_rng(2).normal(size=200)
    assert init_scale(v, 7) == pytest.approx(2 * np.mean(np.abs(v)) / math.sqrt(7), abs=1e-9)
    with pytest.raises(ContractError):
        init_scale(np.array([]), 1)


def test_lsq_grad_factor():
    assert lsq_grad_factor(100, 1) == pytest.approx(0.1)
    sp = make_spec(np.ones((10, 10)), 2)
    assert sp.scale_grad_factor == pytest.approx(0.1)


def test_fake_quant_node_uses_same_rules():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    sp = spec(3, 0.5, g=0.2)
    sp.scale.requires_grad = True
    up = rng.normal(size=(5, 4))
    T.backward(T.sum(T.mul(fake_quant(x, sp), Tensor(up))))
    gx, gs = quantize_backward(up, x.data, sp)
    np.testing.assert_array_equal(x.grad, gx)
    assert float(sp.scale.grad) == pytest.approx(gs, rel=1e-12)


def test_nonpositive_scale_rejected():
    with pytest.raises(ContractError):
        spec(2, 0.0)


def test_spec_round_trip():
    sp = spec(4, 0.25, ACTIVATION, 0.3, np.float32)
    back = QuantSpec.from_dict(sp.to_dict())
    assert back.to_dict() == sp.to_dict()


finite = st.floats(-50, 50, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, 64, elements=finite), st.sampled_from([2, 3, 4, 8]),
       st.floats(1e-3, 4.0), st.sampled_from([WEIGHT, ACTIVATION]))
def test_idempotent_and_on_grid(x, bits, s, mode):
    sp = spec(bits, s, mode, dtype=np.float32)
    q = quantize_forward(x, sp)
    np.testing.assert_array_equal(quantize_forward(q, sp), q)
    k = q / np.float32(s)
    assert np.all(np.abs(k - np.round(k)) <= 4 * np.finfo(np.float32).eps * np.maximum(1, np.abs(k)))
    assert np.all(np.round(k) >= -sp.q_n) and np.all(np.round(k) <= sp.q_p)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 64, elements=st.floats(-20, 20)), st.sampled_from([2, 3, 4, 8]), st.floats(1e-3, 4.0))
def test_monotone(x, bits, s):
    xs = np.sort(x)
    q = quantize_forward(xs, spec(bits, s))
    assert np.all(np.diff(q) >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 32, elements=st.floats(-20, 20)), st.sampled_from([2, 3, 4, 8]), st.floats(1e-2, 4.0))
def test_ste_mask(x, bits, s):
    up = np.linspace(-1, 1, x.size)
    gx, _ = quantize_backward(up, x, spec(bits, s))
    qn, qp = quant_bounds(bits, WEIGHT)
    mask = np.array([(-qn <= v / s <= qp) for v in x])
    np.testing.assert_array_equal(gx, np.where(mask, up, 0.0))


def test_sixteen_bit_error_bounded_by_half_step():
    x = np.random.default_rng(4).uniform(-1, 1, size=10_000)
    s = 1.0 / 2**14
    q = quantize_forward(x, spec(16, s))
    assert np.max(np.abs(q - x)) <= s / 2 + 1e-15
