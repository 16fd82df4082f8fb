import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srmm import netcore
from srmm.errors import ContractError, DegenerateBatchError, LabelError, ShapeError
from srmm.netcore import (
    AdamState,
    BatchNorm,
    Dropout,
    L2Norm,
    Linear,
    ReLU,
    Sequential,
    SoftmaxCrossEntropy,
    adam_step,
    grad_check,
    layer_grad_check,
)


def _linear(w, b):
    layer = Linear(*np.asarray(w).shape)
    layer.params["weight"] = np.asarray(w, dtype=float)
    layer.params["bias"] = np.asarray(b, dtype=float).reshape(1, -1)
    return layer


class TestLinear:
    def test_identity_weights(self):
        out = _linear([[1, 0], [0, 1]], [0, 0]).forward(np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(out, [[1, 2]])

    def test_hand_sum(self):
        out = _linear([[2], [3]], [1]).forward(np.array([[1.0, 1.0]]))
        np.testing.assert_array_equal(out, [[6]])

    def test_finite_differences(self, rng):
        layer = Linear(4, 5, rng)
        errs = layer_grad_check(layer, rng.standard_normal((3, 4)))
        assert max(errs.values()) < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            Linear(4, 5).forward(np.zeros((2, 3)))


class TestBatchNorm:
    def test_zero_variance_batch(self):
        bn = BatchNorm(3)
        out = bn.forward(np.tile([[1.0, -2.0, 5.0]], (4, 1)), train=True)
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_running_stats(self, rng):
        bn = BatchNorm(5)
        x = rng.standard_normal((4, 5))
        np.testing.assert_allclose(bn.forward(x, train=False), x / math.sqrt(1 + bn.eps), rtol=0, atol=1e-15)

    def test_finite_differences(self, rng):
        errs = layer_grad_check(BatchNorm(6), rng.standard_normal((8, 6)), train=True)
        assert max(errs.values()) < 1e-5

    def test_infer_mode_gradient(self, rng):
        bn = BatchNorm(6)
        bn.running_mean = rng.standard_normal(6)
        bn.running_var = rng.uniform(0.5, 2.0, 6)
        errs = layer_grad_check(bn, rng.standard_normal((5, 6)), train=False)
        assert max(errs.values()) < 1e-6

    def test_train_output_standardised(self, rng):
        x = 3.0 * rng.standard_normal((64, 7)) + 4.0
        out = BatchNorm(7).forward(x, train=True)
        assert np.abs(out.mean(axis=0)).max() < 1e-7
        assert np.abs(out.var(axis=0) - 1.0).max() < 1e-5

    def test_running_stats_ema(self, rng):
        bn = BatchNorm(2)
        x = rng.standard_normal((10, 2))
        bn.forward(x, train=True)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
        assert (bn.running_var > 0).all()

    def test_single_row_train_batch_rejected(self):
        with pytest.raises(DegenerateBatchError):
            BatchNorm(3).forward(np.ones((1, 3)), train=True)


class TestReLU:
    def test_sign_cases(self):
        np.testing.assert_array_equal(ReLU().forward(np.array([[-1.0, 0.0, 2.0]])), [[0, 0, 2]])

    def test_mask_at_zero(self):
        r = ReLU()
        r.forward(np.array([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(r.backward(np.array([[5.0, 5.0, 5.0]])), [[0, 0, 5]])

    def test_finite_differences_away_from_kink(self, rng):
        x = rng.choice([-1.0, 1.0], size=(4, 5)) * rng.uniform(1e-2, 2.0, size=(4, 5))
        assert layer_grad_check(ReLU(), x)["input"] < 1e-6


class TestDropout:
    def test_zero_rate_is_identity(self, rng):
        x = rng.standard_normal((5, 4))
        np.testing.assert_array_equal(Dropout(0.0).forward(x, train=True, rng=rng), x)

    def test_inference_is_identity(self, rng):
        x = rng.standard_normal((5, 4))
        assert Dropout(0.5).forward(x, train=False) is x

    def test_expectation_preserved(self):
        out = Dropout(0.5).forward(np.ones((1000, 1000)), train=True, rng=np.random.default_rng(3))
        assert 0.995 <= out.mean() <= 1.005
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_train_mode_requires_rng(self):
        with pytest.raises(ContractError):
            Dropout(0.5).forward(np.ones((2, 2)), train=True)

    def test_invalid_rate(self):
        with pytest.raises(ContractError):
            Dropout(1.0)

    def test_backward_uses_cached_mask(self, rng):
        d = Dropout(0.5)
        out = d.forward(np.ones((3, 4)), train=True, rng=rng)
        np.testing.assert_array_equal(d.backward(np.ones((3, 4))), out)


class TestL2Norm:
    def test_three_four_five(self):
        np.testing.assert_allclose(L2Norm().forward(np.array([[3.0, 4.0]])), [[0.6, 0.8]], rtol=1e-15)

    def test_unit_rows_unchanged(self, rng):
        x = rng.standard_normal((4, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        np.testing.assert_allclose(L2Norm().forward(x), x, rtol=1e-15)

    def test_finite_differences(self, rng):
        assert layer_grad_check(L2Norm(), rng.standard_normal((4, 8)))["input"] < 1e-5

    def test_zero_row_floored(self):
        norm = L2Norm()
        out = norm.forward(np.zeros((2, 3)))
        assert np.isfinite(out).all()
        assert np.isfinite(norm.backward(np.ones((2, 3)))).all()

    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
    def test_rows_unit_norm(self, x):
        norms = np.linalg.norm(x, axis=1)
        out = L2Norm().forward(x)
        big = norms > 1e-6
        np.testing.assert_allclose(np.linalg.norm(out[big], axis=1), 1.0, atol=1e-9)


class TestSoftmaxCE:
    def test_uniform_logits(self):
        loss, _ = SoftmaxCrossEntropy().forward(np.zeros((3, 101)), [0, 50, 100])
        assert loss == pytest.approx(math.log(101), abs=1e-12)
        assert round(loss, 5) == 4.61512

    def test_confident_correct(self):
        loss, _ = SoftmaxCrossEntropy().forward(np.array([[10.0, -10.0]]), [0])
        assert loss < 1e-4

    def test_finite_differences(self, rng):
        ce = SoftmaxCrossEntropy()
        logits = rng.standard_normal((5, 7))
        labels = rng.integers(0, 7, 5)

        def f():
            return ce.forward(logits, labels)[0]

        f()
        analytic = ce.backward().reshape(-1)
        numeric = [netcore._numeric_grad(f, logits, i, 1e-5) for i in range(logits.size)]
        assert netcore.relative_error(analytic, numeric).max() < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(LabelError, match="index 1"):
            SoftmaxCrossEntropy().forward(np.zeros((2, 3)), [0, 3])

    @settings(max_examples=50)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-500, 500)))
    def test_probs_on_simplex(self, logits):
        _, probs = SoftmaxCrossEntropy().forward(logits, [0, 1, 2, 3])
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9
        assert (probs >= 0).all() and (probs <= 1).all()


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.5, -2.0])}
        state = AdamState()
        adam_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(p["w"], [1.5, -2.0])
        assert state.step_count == 1

    def test_single_step_is_lr(self):
        # m_hat = v_hat = g after bias correction, so the step is lr * g / (|g| + eps)
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(lr=0.01))
        assert p["w"][0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)

    def test_quadratic_convergence(self):
        p = {"w": np.array([1.0])}
        state = AdamState(lr=0.01)
        for _ in range(200):
            adam_step(p, {"w": 2.0 * p["w"]}, state)
        assert abs(p["w"][0]) < 0.1
        assert state.step_count == 200

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())

    def test_second_moment_nonnegative(self, rng):
        p = {"w": rng.standard_normal(10)}
        state = AdamState()
        for _ in range(5):
            adam_step(p, {"w": rng.standard_normal(10)}, state)
        assert (state.second_moment["w"] >= 0).all()


def _srmm_stack(rng, d=16, hidden=32, classes=5):
    return Sequential([
        Linear(d, hidden, rng), BatchNorm(hidden), ReLU(), Dropout(0.5),
        Linear(hidden, hidden, rng), L2Norm(), Linear(hidden, classes, rng),
    ])


class TestGradCheck:
    def test_full_stack(self, rng):
        net = _srmm_stack(rng)
        x = rng.standard_normal((8, 16))
        assert grad_check(net, x, rng.integers(0, 5, 8), eps=1e-5) < 1e-4

    def test_linear_only(self, rng):
        net = Sequential([Linear(16, 5, rng)])
        assert grad_check(net, rng.standard_normal((8, 16)), rng.integers(0, 5, 8)) < 1e-7

    def test_detects_corrupted_gradient(self, rng):
        net = _srmm_stack(rng)
        err = grad_check(net, rng.standard_normal((8, 16)), rng.integers(0, 5, 8), scale_grads={"0.weight": 2.0})
        assert err > 0.3

    def test_leaves_running_stats_and_masks_alone(self, rng):
        net = _srmm_stack(rng)
        before = net[1].running_mean.copy()
        grad_check(net, rng.standard_normal((8, 16)), rng.integers(0, 5, 8))
        np.testing.assert_array_equal(net[1].running_mean, before)
        assert net[3].frozen_mask is None


def test_forward_is_deterministic_under_seed():
    outs = []
    for _ in range(2):
        r = np.random.default_rng(9)
        net = _srmm_stack(r)
        outs.append(net.forward(np.ones((4, 16)), train=True, rng=np.random.default_rng(1)))
    assert outs[0].tobytes() == outs[1].tobytes()
