import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from osdquant.fakequant import (FakeQuantizer, LinearizedQuantizer, QuantParams, calibrate_minmax,
                                qrange, quant_error, quantize, ste_grad, ste_mask)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
tensors = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite)


def test_qrange():
    assert qrange(4, True) == (-8, 7)
    assert qrange(4, False) == (0, 15)
    for bad in (1, 9):
        with pytest.raises(ValueError):
            qrange(bad, True)


def test_params_validation():
    with pytest.raises(ValueError):
        QuantParams(scale=0.0, zero=0.0, bits=4, symmetric=True)
    with pytest.raises(ValueError):
        QuantParams(scale=1.0, zero=0.5, bits=4, symmetric=True)
    with pytest.raises(ValueError):
        QuantParams(scale=[1.0, 2.0], zero=[0.0, 0.0], bits=4, symmetric=True)
    p = QuantParams(scale=[1.0, 2.0], zero=[0.0, 0.0], bits=4, symmetric=True, axis=0)
    assert p.granularity == "per-channel(0)" and (p.lower, p.upper) == (-8, 7)


def test_params_dict_roundtrip():
    for p in (calibrate_minmax(np.arange(12.0).reshape(3, 4), 4, axis=0, symmetric=True),
              calibrate_minmax(np.arange(5.0), 6)):
        d = p.to_dict()
        assert set(d) >= {"bits", "scale", "zero", "granularity", "symmetric"}
        q = QuantParams.from_dict(d)
        assert np.array_equal(q.scale, p.scale) and q.axis == p.axis and q.bits == p.bits


def test_calibrate_symmetric_unit_range():
    x = np.linspace(-1.0, 1.0, 11)
    p = calibrate_minmax(x, 4, symmetric=True)
    assert p.scale[0] == 1 / 7 and p.zero[0] == 0.0


def test_calibrate_asymmetric():
    x = np.array([-2.0, 0.0, 1.0])
    p = calibrate_minmax(x, 4)
    assert p.scale[0] == 3.0 / 15 and p.zero[0] == -2.0
    assert quantize(x, p).min() == -2.0 and quantize(x, p).max() == 1.0


def test_constant_tensor_is_exact():
    x = np.full((3, 4), 5.0)
    p = calibrate_minmax(x, 4)
    assert p.scale[0] == 1.0 and p.zero[0] == 5.0
    assert np.array_equal(quantize(x, p), x)
    assert quant_error(x, p) == 0.0
    assert np.array_equal(quantize(np.zeros(3), calibrate_minmax(np.zeros(3), 4, symmetric=True)), np.zeros(3))


def test_calibrate_empty():
    with pytest.raises(ValueError):
        calibrate_minmax(np.array([]), 4)


def test_quantize_examples():
    p = QuantParams(scale=0.25, zero=0.0, bits=4, symmetric=True)
    assert quantize(np.array([0.5]), p)[0] == 0.5
    assert quantize(np.array([100.0]), p)[0] == 1.75
    assert quantize(np.array([-100.0]), p)[0] == -2.0


def test_round_half_to_even():
    p = QuantParams(scale=1.0, zero=0.0, bits=4, symmetric=True)
    assert quantize(np.array([0.5, 1.5, 2.5, -0.5]), p).tolist() == [0.0, 2.0, 2.0, -0.0]


def test_identity_params():
    x = np.array([1.234, -5.0])
    assert np.array_equal(quantize(x, None), x)
    assert np.array_equal(ste_mask(x, None), np.ones(2))


def test_more_bits_less_error(rng):
    x = rng.standard_normal(4096)
    errs = [quant_error(x, calibrate_minmax(x, b)) for b in range(2, 9)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_per_channel_axis(rng):
    w = rng.standard_normal((5, 3)) * np.array([1.0, 10.0, 100.0])
    pc = calibrate_minmax(w, 4, axis=1, symmetric=True)
    assert pc.scale.shape == (3,)
    assert np.allclose(pc.scale, np.abs(w).max(axis=0) / 7)


def test_ste_examples():
    p = QuantParams(scale=1.0, zero=0.0, bits=4, symmetric=True)
    up = np.array([2.0, 3.0])
    assert np.array_equal(ste_grad(np.array([1.0, -3.0]), p, up), up)
    assert np.array_equal(ste_grad(np.array([100.0, -100.0]), p, up), np.zeros(2))
    # boundary: (x - z)/s == l and == u pass, just outside does not
    assert ste_mask(np.array([-8.0, 7.0, 7.0001, -8.0001]), p).tolist() == [1, 1, 0, 0]


def test_ste_mask_scalar_oracle(rng):
    x = rng.normal(0, 3, 10_000)
    p = calibrate_minmax(rng.normal(0, 1, 100), 4)
    s, z = p.scale[0], p.zero[0]
    oracle = np.array([1.0 if p.lower <= (v - z) / s <= p.upper else 0.0 for v in x])
    assert np.array_equal(ste_mask(x, p), oracle)
    with pytest.raises(ValueError):
        ste_grad(x, p, np.ones(3))


def test_fake_quantizer_and_linearization(rng):
    x0 = rng.standard_normal(50)
    p = calibrate_minmax(x0 * 0.8, 4)
    xq, mask = FakeQuantizer(p)(x0)
    assert np.array_equal(xq, quantize(x0, p)) and np.array_equal(mask, ste_mask(x0, p))
    lin = LinearizedQuantizer(p, x0)
    assert np.array_equal(lin(x0)[0], xq)
    dx = rng.standard_normal(50) * 1e-3
    assert np.allclose(lin(x0 + dx)[0] - xq, mask * dx, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(tensors, st.integers(2, 8), st.booleans())
def test_idempotent_and_bounded(x, bits, symmetric):
    p = calibrate_minmax(x, bits, symmetric=symmetric)
    xq = quantize(x, p)
    assert np.array_equal(quantize(xq, p), xq)
    s, z = p.scale[0], p.zero[0]
    assert np.all(xq >= s * p.lower + z - 1e-9) and np.all(xq <= s * p.upper + z + 1e-9)
    t = (x - z) / s
    inside = (t >= p.lower) & (t <= p.upper)
    assert np.all(np.abs(x - xq)[inside] <= s / 2 + 1e-9 * max(1.0, np.abs(x).max()))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=finite), st.integers(2, 8))
def test_per_channel_error_bound_within_per_tensor_bound(x, bits):
    # total error is not ordered in general (grids differ); the worst-case bound is
    pt = calibrate_minmax(x, bits)
    pc = calibrate_minmax(x, bits, axis=0)
    live = np.ptp(x, axis=1) > 0
    assert np.all(pc.scale[live] <= pt.scale[0] * (1 + 1e-12))
    err = np.abs(x - quantize(x, pc)).max(axis=1)
    assert np.all(err[live] <= pc.scale[live] / 2 * (1 + 1e-9) + 1e-12)
    assert np.all(err[~live] == 0)


def test_per_channel_error_on_continuous_data(rng):
    for _ in range(50):
        x = rng.standard_normal((8, 64)) * rng.uniform(0.1, 10, (8, 1))
        assert quant_error(x, calibrate_minmax(x, 4, axis=0)) <= quant_error(x, calibrate_minmax(x, 4))
