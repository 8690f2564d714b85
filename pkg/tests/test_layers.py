import logging
import math

import numpy as np
import pytest

from fer_forge import layers as L
from fer_forge.gradcheck import check_layer, fd_gradient, relative_error
from fer_forge.layers import (
    LayerSpec,
    cross_entropy_loss,
    dense_backward,
    dense_forward,
    dropout_forward,
    flatten,
    relu_backward,
    relu_forward,
    softmax_backward,
    softmax_forward,
    softmax_xent_grad,
)
from fer_forge.tensor import ShapeError


class TestReLU:
    def test_examples(self):
        assert np.array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
        assert not relu_forward(np.array([-3.0, -0.5, -1e-9])).any()

    def test_backward_subgradient(self):
        grad = relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 7.0]))
        assert np.array_equal(grad, [0.0, 7.0])

    def test_zero_input_gets_zero_gradient(self):
        grad = relu_backward(np.array([0.0]), np.array([3.0]))
        assert np.array_equal(grad, [0.0])


class TestSoftmax:
    def test_uniform_over_seven_zeros(self):
        out = softmax_forward(np.zeros(7))
        assert np.allclose(out, 1.0 / 7.0)

    def test_large_symmetric_logits_stable(self):
        out = softmax_forward(np.array([1000.0, 1000.0]))
        assert np.allclose(out, [0.5, 0.5])
        assert np.isfinite(out).all()

    def test_closed_form_quarter_three_quarters(self):
        out = softmax_forward(np.array([0.0, math.log(3.0)]))
        assert np.allclose(out, [0.25, 0.75])

    def test_sums_to_one_and_open_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            out = softmax_forward(rng.normal(0, 5, size=7))
            assert abs(out.sum() - 1.0) < 1e-6
            assert ((out > 0) & (out < 1)).all()

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            softmax_forward(np.array([1.0, np.nan]))


class TestDense:
    def test_identity_weights(self):
        x = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(dense_forward(x, np.eye(3), np.zeros(3)), x)

    def test_hand_arithmetic(self):
        out = dense_forward(np.array([1.0, 2.0]), np.array([[1.0], [1.0]]), np.array([3.0]))
        assert np.array_equal(out, [6.0])

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(5)
        w = rng.standard_normal((5, 3))
        b = rng.standard_normal(3)
        proj = rng.standard_normal(3)

        def loss():
            return float(np.sum(dense_forward(x, w, b) * proj))

        gx, gw, gb = dense_backward(x, w, proj)
        assert relative_error(gx, fd_gradient(loss, x)) < 1e-6
        assert relative_error(gw, fd_gradient(loss, w)) < 1e-6
        assert relative_error(gb, fd_gradient(loss, b)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dense_forward(np.zeros(4), np.zeros((5, 2)), np.zeros(2))


class TestDropout:
    def test_rate_zero_identity_both_modes(self):
        x = np.random.default_rng(2).random(100)
        for train in (True, False):
            out, mask = dropout_forward(x, 0.0, train, 0)
            assert np.array_equal(out, x)
            assert mask is None

    def test_infer_mode_is_identity(self):
        x = np.random.default_rng(3).random(50)
        out, mask = dropout_forward(x, 0.7, False, 0)
        assert out is x
        assert mask is None

    def test_expectation_preserved(self):
        x = np.ones(10_000)
        out, _ = dropout_forward(x, 0.5, True, 42)
        assert abs(out.mean() - 1.0) < 0.05

    def test_survivors_scaled(self):
        x = np.ones(1000)
        out, mask = dropout_forward(x, 0.25, True, 7)
        kept = out[out != 0]
        assert np.allclose(kept, 1.0 / 0.75)
        assert np.array_equal(out, mask)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            dropout_forward(np.ones(3), 1.0, True, 0)


class TestFlatten:
    def test_architecture_length(self):
        x = np.zeros((256, 7, 7))
        assert flatten(x).shape == (12544,)

    def test_degenerate(self):
        assert flatten(np.ones((1, 1, 1))).shape == (1,)

    def test_round_trip(self):
        x = np.random.default_rng(4).random((3, 4, 5))
        assert np.array_equal(flatten(x).reshape(3, 4, 5), x)

    def test_row_major_order(self):
        x = np.arange(24).reshape(2, 3, 4)
        assert np.array_equal(flatten(x), np.arange(24))


class TestCrossEntropy:
    def test_certain_prediction_zero_loss(self):
        probs = np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        target = np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        assert cross_entropy_loss(probs, target) == 0.0

    def test_uniform_probs_ln7(self):
        probs = np.full(7, 1.0 / 7.0)
        target = np.zeros(7)
        target[3] = 1.0
        assert abs(cross_entropy_loss(probs, target) - math.log(7.0)) < 1e-9

    def test_l2_term_hand_arithmetic(self):
        probs = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        target = probs.copy()
        loss = cross_entropy_loss(probs, target, [(0.001, np.array([1.0, 2.0]))])
        assert abs(loss - 0.005) < 1e-12

    def test_degenerate_prob_clamped_and_logged(self, caplog):
        probs = np.array([1.0, 0.0])
        target = np.array([0.0, 1.0])
        with caplog.at_level(logging.WARNING):
            loss = cross_entropy_loss(probs, target)
        assert np.isfinite(loss)
        assert abs(loss - -math.log(1e-12)) < 1e-6
        assert "clamped" in caplog.text

    def test_batch_mean(self):
        probs = np.array([[0.5, 0.5], [0.25, 0.75]])
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        expected = (-math.log(0.5) - math.log(0.75)) / 2.0
        # 2-class rows are fine: the loss only reads the true-class column
        assert abs(cross_entropy_loss(probs, target) - expected) < 1e-12


class TestFusedSoftmaxXent:
    def test_fused_equals_chained_jacobian(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            logits = rng.normal(0, 2, size=7)
            probs = softmax_forward(logits)
            target = np.zeros(7)
            target[rng.integers(0, 7)] = 1.0
            # d(-log p_true)/d probs chained through the softmax Jacobian
            dprobs = -target / probs
            chained = softmax_backward(probs, dprobs)
            fused = softmax_xent_grad(probs, target)
            assert np.abs(chained - fused).max() < 1e-6

    def test_fused_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(0, 1, size=7)
        target = np.zeros(7)
        target[2] = 1.0

        def loss():
            return cross_entropy_loss(softmax_forward(logits), target)

        fused = softmax_xent_grad(softmax_forward(logits), target)
        assert relative_error(fused, fd_gradient(loss, logits)) < 1e-6


class TestAllLayerKindsFiniteDifferences:
    """The module's main test surface: every backward vs central differences."""

    CASES = [
        (LayerSpec("conv2d", {"filters": 4, "kernel_size": 3}), (2, 8, 8)),
        (LayerSpec("conv2d", {"filters": 3, "kernel_size": 3, "padding": 1}), (2, 6, 6)),
        (LayerSpec("maxpool2d"), (2, 6, 6)),
        (LayerSpec("relu"), (2, 5, 5)),
        (LayerSpec("dense", {"units": 6}), (9,)),
        (LayerSpec("dense", {"units": 4, "l2_penalty": 0.001}), (7,)),
        (LayerSpec("dropout", {"rate": 0.3}), (2, 5, 5)),
        (LayerSpec("flatten"), (2, 3, 4)),
        (LayerSpec("softmax"), (7,)),
    ]

    @pytest.mark.parametrize(
        "spec,in_shape", CASES, ids=[f"{s.kind}-{i}" for i, (s, _) in enumerate(CASES)]
    )
    def test_backward_matches_fd(self, spec, in_shape):
        err = check_layer(spec.materialize(), in_shape, seed=1234)
        assert err < 1e-5

    def test_l2_gradient_is_two_lambda_w(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((4, 3))
        penalty = 0.001

        def l2_loss():
            return penalty * float(np.sum(w * w))

        numeric = fd_gradient(l2_loss, w)
        assert relative_error(2.0 * penalty * w, numeric) < 1e-6


class TestLayerSpecs:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown layer kind"):
            LayerSpec("attention").materialize()

    def test_invalid_hyperparams_rejected(self):
        with pytest.raises(ValueError):
            L.Dropout(1.5)
        with pytest.raises(ValueError):
            L.Dense(0)
        with pytest.raises(ValueError):
            L.Conv2D(0)
        with pytest.raises(ValueError):
            L.Dense(4, l2_penalty=-1.0)
