"""Unit tests for demo.py"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from matrix_ad import demo
from matrix_ad.demo import Batch, FFNParams
from matrix_ad.gradcheck import gradcheck, numerical_rank
from matrix_ad.matrix import Mat, random_mat, zeros
from matrix_ad.models import ErrorKind, Field, FieldError
from matrix_ad.reverse import record

DEPTH_WIDTHS = [(5, 4, 3), (6, 5, 4, 3), (5, 4, 4, 3, 2)]


def scalar_loss(params, batch):
    """Straight-line reimplementation on Python floats."""
    X = batch.X.data.tolist()
    Y = batch.Y.data.tolist()
    layers = [(A.data.tolist(), b.data.tolist()) for A, b in params.layers]
    total = 0.0
    for s in range(batch.size):
        a = [row[s] for row in X]
        for A, b in layers:
            z = [
                sum(w * x for w, x in zip(row, a)) + bias
                for row, (bias,) in zip(A, b)
            ]
            a = [1.0 / (1.0 + math.exp(-zi)) for zi in z]
        total += sum((a[i] - Y[i][s]) ** 2 for i in range(len(a)))
    return total / batch.size


class TestParams:
    """Test suite for parameters and batches."""

    def test_init_params_shapes_and_scale(self):
        """Test layer shapes and the 1/√fan_in bound."""
        params = demo.init_params((32, 16, 8), seed=3)
        assert params.depth == 2
        assert params.widths == [32, 16, 8]
        A1, b1 = params.layers[0]
        assert A1.shape == (16, 32) and b1.shape == (16, 1)
        assert np.max(np.abs(A1.data)) <= 1.0 / math.sqrt(32)

    def test_init_params_is_seeded(self):
        """Test that a seed fixes the parameters."""
        first = demo.init_params((4, 3, 2), seed=5).leaves()
        second = demo.init_params((4, 3, 2), seed=5).leaves()
        for name in first:
            assert_allclose(first[name].data, second[name].data)

    def test_leaf_names(self):
        """Test the A1, b1, … ordering."""
        params = demo.init_params((4, 3, 3, 2))
        assert list(params.leaves()) == ["A1", "b1", "A2", "b2", "A3", "b3"]

    def test_layers_must_chain(self):
        """Test ShapeMismatch when a layer does not fit the previous one."""
        layers = [(zeros(3, 4), zeros(3, 1)), (zeros(2, 2), zeros(2, 1))]
        with pytest.raises(FieldError) as exc_info:
            FFNParams(layers)
        assert exc_info.value.kind == ErrorKind.SHAPE_MISMATCH

    def test_layers_are_real(self):
        """Test FieldMismatch for complex parameters."""
        layers = [(zeros(3, 4, Field.COMPLEX), zeros(3, 1, Field.COMPLEX))]
        with pytest.raises(FieldError) as exc_info:
            FFNParams(layers)
        assert exc_info.value.kind == ErrorKind.FIELD_MISMATCH

    def test_needs_a_layer(self):
        """Test that an empty network is refused."""
        with pytest.raises(FieldError):
            FFNParams([])

    @pytest.mark.parametrize("widths", [(4,), (4, 0, 2)])
    def test_bad_widths(self, widths):
        """Test that widths need two positive entries."""
        with pytest.raises(FieldError):
            demo.init_params(widths)

    def test_batch_columns_must_match(self):
        """Test that X and Y have one column per sample."""
        with pytest.raises(FieldError) as exc_info:
            Batch(zeros(4, 3), zeros(2, 2))
        assert exc_info.value.kind == ErrorKind.SHAPE_MISMATCH

    def test_random_batch(self):
        """Test batch shapes and the target range."""
        batch = demo.random_batch((4, 3, 2), 5, seed=1)
        assert batch.X.shape == (4, 5)
        assert batch.Y.shape == (2, 5)
        assert np.all((batch.Y.data >= 0.0) & (batch.Y.data < 1.0))
        with pytest.raises(FieldError):
            demo.random_batch((4, 3, 2), 0)

    def test_sample(self):
        """Test that sample(i) takes one column."""
        batch = demo.random_batch((4, 3, 2), 3, seed=1)
        one = batch.sample(2)
        assert one.size == 1
        assert_allclose(one.X.data[:, 0], batch.X.data[:, 2])


class TestLoss:
    """Test suite for the network loss."""

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scalar_reimplementation(self, seed):
        """Test the default network against plain Python arithmetic."""
        params = demo.init_params(demo.DEFAULT_WIDTHS, seed)
        for r in (1, 4):
            batch = demo.random_batch(demo.DEFAULT_WIDTHS, r, seed)
            expected = scalar_loss(params, batch)
            assert demo.ffn_loss(params, batch) == pytest.approx(expected, rel=1e-12)

    def test_program_evaluates_to_loss(self):
        """Test that the recorded program computes the same loss."""
        params = demo.init_params((5, 4, 3), seed=2)
        batch = demo.random_batch((5, 4, 3), 6, seed=2)
        program, leaves = demo.ffn_program(params, batch)
        tape = record(program, leaves)
        assert tape.result == pytest.approx(demo.ffn_loss(params, batch), rel=1e-14)

    def test_scale_only_for_batches(self):
        """Test that the 1/r scaling is appended only when r > 1."""
        params = demo.init_params((5, 4, 3))
        single, _ = demo.ffn_program(params, demo.random_batch((5, 4, 3), 1))
        batched, _ = demo.ffn_program(params, demo.random_batch((5, 4, 3), 4))
        assert len(single.ops) == 7
        assert len(batched.ops) == 8

    def test_zero_residual(self):
        """Test that targets equal to the output give zero loss and gradients."""
        params = demo.init_params((5, 4, 3), seed=4)
        X = demo.random_batch((5, 4, 3), 3, seed=4).X
        outputs = demo.ffn_backward_manual(params, Batch(X, zeros(3, 3))).activations
        batch = Batch(X, outputs[-1])
        assert demo.ffn_loss(params, batch) == 0.0
        manual = demo.ffn_backward_manual(params, batch)
        for g in manual.gradients.values():
            assert np.all(g.data == 0.0)

    def test_batch_shape_mismatch(self):
        """Test that the batch must fit the network."""
        params = demo.init_params((5, 4, 3))
        with pytest.raises(FieldError) as exc_info:
            demo.ffn_loss(params, Batch(zeros(4, 2), zeros(3, 2)))
        assert exc_info.value.kind == ErrorKind.SHAPE_MISMATCH

    def test_permutation_invariance(self):
        """Test that reordering samples changes neither loss nor gradients."""
        params = demo.init_params((5, 4, 3), seed=6)
        batch = demo.random_batch((5, 4, 3), 5, seed=6)
        order = [3, 0, 4, 1, 2]
        permuted = Batch(Mat(batch.X.data[:, order]), Mat(batch.Y.data[:, order]))
        assert demo.ffn_loss(params, permuted) == pytest.approx(
            demo.ffn_loss(params, batch), rel=1e-14
        )
        original = demo.ffn_backward_manual(params, batch).gradients
        shuffled = demo.ffn_backward_manual(params, permuted).gradients
        for name in original:
            assert_allclose(
                shuffled[name].data, original[name].data, rtol=1e-12, atol=1e-15
            )


class TestBackward:
    """Test suite for the manual reverse pass."""

    @pytest.mark.parametrize("widths", DEPTH_WIDTHS)
    def test_engine_matches_manual(self, widths):
        """Test tape backprop against the manual pass on ten seeds."""
        for seed in range(10):
            params = demo.init_params(widths, seed)
            for r in (1, 3):
                batch = demo.random_batch(widths, r, seed)
                assert demo.engine_manual_check(params, batch).passed

    def test_matches_finite_differences(self):
        """Test the manual gradients against gradcheck at atol 0.01."""
        params = demo.init_params((6, 5, 4), seed=7)
        batch = demo.random_batch((6, 5, 4), 3, seed=7)
        program, leaves = demo.ffn_program(params, batch)
        assert gradcheck(program, leaves).passed
        manual = demo.ffn_backward_manual(params, batch)
        engine = demo.engine_gradients(params, batch)
        for name, g in manual.gradients.items():
            assert_allclose(engine[name].data, g.data, rtol=1e-12, atol=1e-15)

    def test_cotangents_per_layer(self):
        """Test that one pre-activation cotangent is kept per layer."""
        params = demo.init_params((5, 4, 3), seed=1)
        manual = demo.ffn_backward_manual(params, demo.random_batch((5, 4, 3), 2))
        assert [c.shape for c in manual.pre_activation_cotangents] == [(4, 2), (3, 2)]
        assert len(manual.activations) == 3


class TestRankOne:
    """Test suite for the rank-one gradient property."""

    def test_default_network(self):
        """Test rank one for both layer matrices of the default network."""
        params = demo.init_params(demo.DEFAULT_WIDTHS, seed=0)
        sample = demo.random_batch(demo.DEFAULT_WIDTHS, 1, seed=0)
        report = demo.rank1_check(params, sample.X, sample.Y)
        assert report.passed
        assert report.metadata == {"rank_A1": 1, "rank_A2": 1}

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("widths", [(7, 6, 5), (7, 6, 5, 4), (7, 6, 5, 4, 3)])
    def test_every_depth(self, widths, seed):
        """Test rank one at every layer for two to four layers."""
        params = demo.init_params(widths, seed)
        sample = demo.random_batch(widths, 1, seed)
        assert demo.rank1_check(params, sample.X, sample.Y).passed

    def test_batch_breaks_rank_one(self):
        """Test that an eight-sample gradient has rank above one."""
        params = demo.init_params(demo.DEFAULT_WIDTHS, seed=2)
        batch = demo.random_batch(demo.DEFAULT_WIDTHS, 8, seed=2)
        gradient = demo.ffn_backward_manual(params, batch).gradients["A1"]
        rank = numerical_rank(gradient, demo.RANK_TOL)
        assert 1 < rank <= min(8, *gradient.shape)

    def test_needs_one_sample(self):
        """Test that a multi-sample input is reported as a failure."""
        params = demo.init_params((5, 4, 3))
        batch = demo.random_batch((5, 4, 3), 2)
        report = demo.rank1_check(params, batch.X, batch.Y)
        assert not report.passed
        assert report.cases[0].label == "batch"


class TestBatchDecomposition:
    """Test suite for the mean-of-gradients property."""

    @pytest.mark.parametrize("r", [2, 8, 32])
    def test_seeded_batch(self, r):
        """Test the decomposition on several batch sizes."""
        params = demo.init_params(demo.DEFAULT_WIDTHS, seed=3)
        batch = demo.random_batch(demo.DEFAULT_WIDTHS, r, seed=3)
        report = demo.batched_gradient_decomposition(params, batch)
        assert report.passed
        assert report.metadata == {"batch": r}

    def test_identical_samples(self):
        """Test that two copies of a sample give the single-sample gradient."""
        params = demo.init_params((5, 4, 3), seed=1)
        one = demo.random_batch((5, 4, 3), 1, seed=1)
        twice = Batch(
            Mat(np.hstack([one.X.data, one.X.data])),
            Mat(np.hstack([one.Y.data, one.Y.data])),
        )
        assert demo.batched_gradient_decomposition(params, twice).passed
        single = demo.ffn_backward_manual(params, one).gradients
        doubled = demo.ffn_backward_manual(params, twice).gradients
        for name in single:
            assert_allclose(
                doubled[name].data, single[name].data, rtol=1e-13, atol=1e-16
            )

    def test_zero_weights_and_targets(self):
        """Test the degenerate network with zero weights and targets."""
        widths = (4, 3, 2)
        layers = [
            (zeros(3, 4), random_mat(3, 1, seed=1)),
            (zeros(2, 3), random_mat(2, 1, seed=2)),
        ]
        params = FFNParams(layers)
        X = random_mat(4, 5, seed=3)
        batch = Batch(X, zeros(2, 5))
        assert demo.batched_gradient_decomposition(params, batch).passed
        gradients = demo.ffn_backward_manual(params, batch).gradients
        # A2 = 0 blocks the cotangent from reaching the first layer
        assert np.all(gradients["A1"].data == 0.0)
        assert np.all(gradients["b1"].data == 0.0)
        assert np.any(gradients["b2"].data != 0.0)
        assert params.widths == list(widths)

    def test_needs_two_samples(self):
        """Test that a one-sample batch is reported as a failure."""
        params = demo.init_params((5, 4, 3))
        report = demo.batched_gradient_decomposition(
            params, demo.random_batch((5, 4, 3), 1)
        )
        assert not report.passed


class TestTraining:
    """Test suite for gradient descent and the full demo."""

    def test_gradient_descent_lowers_loss(self):
        """Test that fifty steps reduce the loss."""
        params = demo.init_params((5, 4, 3), seed=8)
        batch = demo.random_batch((5, 4, 3), 6, seed=8)
        trained, history = demo.gradient_descent(params, batch, steps=50, lr=0.5)
        assert len(history) == 51
        assert history[-1] < history[0]
        assert history[-1] == pytest.approx(demo.ffn_loss(trained, batch))

    def test_default_rate_decreases_every_step(self):
        """Test that the loss goes down at every one of fifty steps."""
        params = demo.init_params((5, 4, 3), seed=9)
        batch = demo.random_batch((5, 4, 3), 4, seed=9)
        _, history = demo.gradient_descent(params, batch, steps=50)
        assert all(after < before for before, after in zip(history, history[1:]))

    def test_updated(self):
        """Test a single update against the raw arithmetic."""
        params = demo.init_params((3, 2), seed=1)
        batch = demo.random_batch((3, 2), 2, seed=1)
        gradients = demo.engine_gradients(params, batch)
        stepped = params.updated(gradients, 0.1)
        expected = params.layers[0][0].data - 0.1 * gradients["A1"].data
        assert_allclose(stepped.layers[0][0].data, expected)

    def test_ffn_demo_single_sample(self):
        """Test the full demo on the default network."""
        report = demo.ffn_demo(seed=1)
        assert report.passed
        assert report.metadata["rank_A1"] == 1
        assert report.metadata["widths"] == "32,16,8"
        prefixes = {case.label.split("/")[0] for case in report.cases}
        assert prefixes == {"gradcheck", "manual", "rank1"}

    def test_ffn_demo_batch(self):
        """Test that batches add the decomposition check."""
        report = demo.ffn_demo((5, 4, 3), r=4, seed=2)
        assert report.passed
        assert any(case.label.startswith("batch/") for case in report.cases)

    def test_ffn_demo_given_batch(self):
        """Test the demo on a caller-supplied batch."""
        batch = Batch(random_mat(4, 2, seed=1), zeros(2, 2))
        report = demo.ffn_demo((4, 3, 2), batch=batch)
        assert report.passed
        assert report.metadata["batch"] == 2
