import dataclasses

import numpy as np
import pytest

from osdquant.fakequant import calibrate_minmax, quantize, FakeQuantizer
from osdquant.model import ToyUNet, make_synthetic_dataset, restore, NoiseSchedule
from osdquant.qdlora import (ForwardCacheError, QuantConv, TrainConfig, TrainingDivergedError,
                             attach_lora, build_quantized, distill_train, forward_qdlora,
                             init_lora_branch, init_svd_branch, layer_rank, merge_branches,
                             weight_matrix)
from osdquant.tensor import ConvSpec, conv2d, im2col


@pytest.fixture(scope="module")
def toy():
    return ToyUNet(0), make_synthetic_dataset(2, 1)


def test_full_rank_branch_leaves_zero_residual(rng):
    w = rng.standard_normal((6, 4))
    b = init_svd_branch(w, 4, weight_bits=None)
    assert np.allclose(b.L1 @ b.L2, w, atol=1e-12)
    assert np.abs(b.residual).max() < 1e-12


def test_rank_one_of_diagonal():
    b = init_svd_branch(np.diag([3.0, 2.0, 1.0]), 1, weight_bits=None)
    assert np.allclose(np.abs(b.L1 @ b.L2), np.diag([3.0, 0, 0]), atol=1e-12)
    assert np.sum(b.residual**2) == pytest.approx(5.0)


def test_rank_validation(rng):
    with pytest.raises(ValueError):
        init_svd_branch(rng.standard_normal((4, 3)), 4)
    with pytest.raises(ValueError):
        init_svd_branch(rng.standard_normal(4), 1)


def test_residual_is_quantized_per_column(rng):
    w = rng.standard_normal((12, 5)) * np.array([0.1, 1, 10, 100, 1000])
    b = init_svd_branch(w, 2, weight_bits=4)
    assert b.residual_params.scale.shape == (5,)
    assert np.array_equal(quantize(b.residual, b.residual_params), b.residual)


def test_lora_init():
    a1, b1 = init_lora_branch(20, 6, 4, seed=11)
    a2, _ = init_lora_branch(20, 6, 4, seed=11)
    a3, _ = init_lora_branch(20, 6, 4, seed=12)
    assert np.array_equal(a1, a2) and not np.array_equal(a1, a3)
    assert a1.shape == (20, 4) and b1.shape == (4, 6) and not b1.any()
    big, _ = init_lora_branch(4000, 1, 16, seed=0)
    assert np.std(big) == pytest.approx(1 / 4, rel=0.03)
    x = np.random.default_rng(0).standard_normal((7, 20))
    assert not (x @ a1 @ b1).any()


def _scalar_forward(x, b, act):
    xq = quantize(x, act)
    n, d_out = x.shape[0], b.residual.shape[1]
    out = np.zeros((n, d_out))
    for i in range(n):
        for j in range(d_out):
            acc = 0.0
            for k in range(x.shape[1]):
                lr = sum(b.L1[k, m] * b.L2[m, j] for m in range(b.rank))
                lr += sum(b.A[k, m] * b.B[m, j] for m in range(b.A.shape[1]))
                acc += x[i, k] * lr + xq[i, k] * b.residual[k, j]
            out[i, j] = acc
    return out


def test_forward_matches_scalar_oracle(rng):
    x, w = rng.standard_normal((5, 8)), rng.standard_normal((8, 3))
    b = attach_lora(init_svd_branch(w, 2), seed=1)
    b = dataclasses.replace(b, B=rng.standard_normal(b.B.shape))
    act = calibrate_minmax(x, 4)
    assert np.allclose(forward_qdlora(x, b, act), _scalar_forward(x, b, act), atol=1e-12)
    assert not forward_qdlora(np.zeros((2, 8)), b, None).any()


def test_identity_weight_full_precision(rng):
    x = rng.standard_normal((4, 6))
    b = attach_lora(init_svd_branch(np.eye(6), 3, weight_bits=None), seed=0)
    assert np.allclose(forward_qdlora(x, b, None), x, atol=1e-12)


def test_merge(rng):
    x, w = rng.standard_normal((9, 32)), rng.standard_normal((32, 20))
    b = attach_lora(init_svd_branch(w, 8), seed=3)
    act = calibrate_minmax(x, 4)
    m0 = merge_branches(b)
    assert m0.rank == 16 and m0.merged
    assert np.allclose(forward_qdlora(x, m0, act), forward_qdlora(x, b, act), rtol=0, atol=1e-12)
    b = dataclasses.replace(b, B=rng.standard_normal(b.B.shape))
    m = merge_branches(b)
    assert np.linalg.matrix_rank(m.L1 @ m.L2) == 16
    assert np.allclose(forward_qdlora(x, m, act), forward_qdlora(x, b, act), atol=1e-10)
    assert merge_branches(m) is m


def _quant_conv(rng, c=4, f=3, r=2, padding=1):
    spec = ConvSpec(c, f, 3, 3, padding=padding)
    kernel = rng.standard_normal(spec.kernel_shape)
    b = attach_lora(init_svd_branch(weight_matrix(kernel), r), seed=5)
    b = dataclasses.replace(b, B=rng.standard_normal(b.B.shape) * 0.1)
    return QuantConv(spec, b.residual, None, None, b), kernel


def test_quant_conv_matches_matrix_form(rng):
    # unpadded: the conv quantizes before zero padding, the row form would quantize the pad
    op, _ = _quant_conv(rng, padding=0)
    x = rng.standard_normal((2, 4, 5, 5))
    op.act = FakeQuantizer(calibrate_minmax(x, 4))
    y = op(x)
    rows = im2col(x, op.spec).T
    ref_rows = forward_qdlora(rows, op.branches, op.act_params)
    assert np.allclose(y.transpose(0, 2, 3, 1).reshape(-1, 3), ref_rows, atol=1e-12)


def test_full_precision_quant_conv_equals_conv(rng):
    spec = ConvSpec(4, 3, 3, 3, padding=1)
    kernel = rng.standard_normal(spec.kernel_shape)
    b = attach_lora(init_svd_branch(weight_matrix(kernel), 2, weight_bits=None), seed=0)
    x = rng.standard_normal((1, 4, 6, 6))
    assert np.allclose(QuantConv(spec, b.residual, branches=b)(x), conv2d(x, kernel, spec), atol=1e-12)


def test_backward_needs_forward(rng):
    op, _ = _quant_conv(rng)
    with pytest.raises(ForwardCacheError):
        op.backward(np.zeros((1, 3, 4, 4)))


def test_branch_gradients_finite_difference(rng, backend):
    op, _ = _quant_conv(rng)
    x = rng.standard_normal((1, 4, 5, 5))
    g = rng.standard_normal((1, 3, 5, 5))
    op(x)
    op.backward(g)
    h = 1e-6
    for name in ("A", "B", "L1", "L2"):
        p = getattr(op.branches, name)
        analytic = op.grads[name]
        for idx in [tuple(rng.integers(0, s) for s in p.shape) for _ in range(4)]:
            orig = p[idx]
            p[idx] = orig + h
            up = np.sum(op(x) * g)
            p[idx] = orig - h
            down = np.sum(op(x) * g)
            p[idx] = orig
            assert (up - down) / (2 * h) == pytest.approx(analytic[idx], rel=1e-5, abs=1e-7)


def test_layer_rank_cap():
    assert layer_rank(36, 8, 8) == 4
    assert layer_rank(576, 64, 8) == 8
    assert layer_rank(4, 1, 8) == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda1=0, lambda2=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(perceptual="lpips")


def test_training_trace_and_determinism(toy):
    model, data = toy
    q = build_quantized(model, data.lq, 4, 4, rank=4)
    cfg = TrainConfig(learning_rate=1e-4, iterations=3)
    r1, r2 = distill_train(q, model, data.lq, cfg), distill_train(q, model, data.lq, cfg)
    assert len(r1.trace) == 4
    assert [t.total for t in r1.trace] == [t.total for t in r2.trace]
    assert r1.final_loss < r1.initial_loss
    # the input model is untouched
    assert not any(op.branches.B.any() for op in q.branch_layers().values())
    mse_only = distill_train(q, model, data.lq, dataclasses.replace(cfg, lambda1=0.0))
    assert [t.total for t in mse_only.trace] != [t.total for t in r1.trace]
    assert all(t.total == pytest.approx(0.5 * t.mse) for t in mse_only.trace)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(toy):
    model, data = toy
    q = build_quantized(model, data.lq, 4, 4, rank=4)
    with pytest.raises(TrainingDivergedError):
        distill_train(q, model, data.lq, TrainConfig(learning_rate=1e300, iterations=3))


def test_high_precision_model_is_near_fp(toy):
    model, data = toy
    sched = NoiseSchedule.linear()
    ref = restore(model, data.lq, sched)
    q = build_quantized(model, data.lq, 8, 8, rank=4)
    err = np.mean((q.restore(data.lq, sched) - ref) ** 2)
    naive = build_quantized(model, data.lq, 3, 3, rank=0)
    assert err < 1e-2 * np.mean((naive.restore(data.lq, sched) - ref) ** 2)
