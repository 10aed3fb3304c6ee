from __future__ import annotations

import unittest

import numpy as np

from fpcnet.diffops import BN_MOMENTUM, Tape, Var, bicubic_upsample_matrix, gradient_check
from fpcnet.geometry import Homography, warp_operator
from fpcnet.losses import consistency_loss_classification, consistency_loss_regression
from fpcnet.models import Rng
from fpcnet.optim import AdamState, adam_step

TOLERANCE = 1e-4


def _weighted_sum(tape: Tape, x: Var, weights: np.ndarray) -> Var:
    def backward(g: np.ndarray) -> None:
        x.grad += g * weights

    return tape.record(np.array(np.sum(x.value * weights)), backward)


def _away_from_zero(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * (0.1 + np.abs(values))


class ConvolutionGradientTests(unittest.TestCase):
    def test_conv2d_stride_and_padding(self) -> None:
        cases = [((2, 2, 5, 6), (3, 2, 3, 3), 1, 1), ((1, 3, 6, 6), (2, 3, 3, 3), 2, 1), ((2, 1, 4, 5), (2, 1, 3, 3), 1, 0)]
        for seed, (x_shape, w_shape, stride, pad) in enumerate(cases):
            rng = Rng(seed)
            x = rng.normal(size=x_shape)
            w = rng.normal(size=w_shape)
            b = rng.normal(size=w_shape[0])
            forward = Tape().conv2d(Var(x), Var(w), Var(b), stride, pad)
            weights = rng.normal(size=forward.shape)

            def build(tape: Tape, xv: Var, wv: Var, bv: Var) -> Var:
                return _weighted_sum(tape, tape.conv2d(xv, wv, bv, stride, pad), weights)

            with self.subTest(case=seed):
                self.assertLess(gradient_check(build, [x, w, b]), TOLERANCE)

    def test_conv1x1(self) -> None:
        for seed, (n, c, o, h, w) in enumerate([(1, 2, 3, 3, 4), (2, 3, 1, 2, 2), (2, 4, 2, 3, 3)]):
            rng = Rng(10 + seed)
            x = rng.normal(size=(n, c, h, w))
            kernel = rng.normal(size=(o, c))
            bias = rng.normal(size=o)
            weights = rng.normal(size=(n, o, h, w))

            def build(tape: Tape, xv: Var, kv: Var, bv: Var) -> Var:
                return _weighted_sum(tape, tape.conv1x1(xv, kv, bv), weights)

            with self.subTest(case=seed):
                self.assertLess(gradient_check(build, [x, kernel, bias]), TOLERANCE)

    def test_conv2d_rejects_channel_mismatch(self) -> None:
        with self.assertRaises(ValueError):
            Tape().conv2d(Var(np.zeros((1, 2, 4, 4))), Var(np.zeros((1, 3, 3, 3))))


class ElementwiseGradientTests(unittest.TestCase):
    def test_relu_and_sigmoid(self) -> None:
        for seed, shape in enumerate([(1, 1, 3, 4), (2, 2, 2, 3), (1, 3, 4, 2)]):
            rng = Rng(20 + seed)
            x = _away_from_zero(rng.normal(size=shape))
            weights = rng.normal(size=shape)

            def build_relu(tape: Tape, xv: Var) -> Var:
                return _weighted_sum(tape, tape.relu(xv), weights)

            def build_sigmoid(tape: Tape, xv: Var) -> Var:
                return _weighted_sum(tape, tape.sigmoid(xv), weights)

            with self.subTest(shape=shape):
                self.assertLess(gradient_check(build_relu, [x]), TOLERANCE)
                self.assertLess(gradient_check(build_sigmoid, [x]), TOLERANCE)

    def test_add_scale_crop_index(self) -> None:
        for seed, shape in enumerate([(2, 1, 5, 6), (1, 2, 4, 4), (3, 1, 3, 5)]):
            rng = Rng(30 + seed)
            a = rng.normal(size=shape)
            b = rng.normal(size=shape)
            weights = rng.normal(size=(shape[2] - 1, shape[3] - 2))

            def build(tape: Tape, av: Var, bv: Var) -> Var:
                mixed = tape.add(av, tape.scale(bv, 0.7))
                window = tape.crop(tape.index(mixed, shape[0] - 1), shape[2] - 1, shape[3] - 2)
                return _weighted_sum(tape, window, weights)

            with self.subTest(shape=shape):
                self.assertLess(gradient_check(build, [a, b]), TOLERANCE)

    def test_reused_variable_accumulates(self) -> None:
        tape = Tape()
        x = tape.variable(np.array([1.0, -2.0]))
        tape.backward(tape.sum(tape.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class BatchNormTests(unittest.TestCase):
    def test_gradients_in_train_and_eval_mode(self) -> None:
        for seed, shape in enumerate([(2, 2, 3, 3), (3, 1, 2, 4), (4, 3, 2, 2)]):
            rng = Rng(40 + seed)
            channels = shape[1]
            x = rng.normal(1.0, 2.0, size=shape)
            gamma = rng.uniform(0.5, 1.5, size=channels)
            beta = rng.normal(size=channels)
            running_mean = rng.normal(size=channels)
            running_var = rng.uniform(0.5, 2.0, size=channels)
            weights = rng.normal(size=shape)
            for train in (True, False):

                def build(tape: Tape, xv: Var, gv: Var, bv: Var) -> Var:
                    out = tape.batch_norm(xv, gv, bv, running_mean, running_var, train)
                    return _weighted_sum(tape, out, weights)

                with self.subTest(shape=shape, train=train):
                    self.assertLess(gradient_check(build, [x, gamma, beta]), TOLERANCE)

    def test_train_mode_records_running_stats(self) -> None:
        x = Rng(5).normal(size=(4, 2, 3, 3))
        tape = Tape()
        tape.batch_norm(Var(x), Var(np.ones(2)), Var(np.zeros(2)), np.zeros(2), np.ones(2), True, name="bn0")
        mean = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(tape.stat_updates["bn0.running_mean"], (1.0 - BN_MOMENTUM) * mean)
        self.assertIn("bn0.running_var", tape.stat_updates)

    def test_eval_mode_leaves_stats_alone(self) -> None:
        tape = Tape()
        tape.batch_norm(Var(np.ones((1, 2, 2, 2))), Var(np.ones(2)), Var(np.zeros(2)), np.zeros(2), np.ones(2), False, "bn")
        self.assertEqual(tape.stat_updates, {})

    def test_train_mode_needs_two_samples(self) -> None:
        with self.assertRaises(ValueError):
            Tape().batch_norm(Var(np.ones((1, 2, 2, 2))), Var(np.ones(2)), Var(np.zeros(2)), np.zeros(2), np.ones(2), True)


class ResampleGradientTests(unittest.TestCase):
    def test_bicubic_matrix_preserves_constants(self) -> None:
        for size in (1, 3, 8):
            matrix = bicubic_upsample_matrix(size)
            self.assertEqual(matrix.shape, (2 * size, size))
            np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-12)

    def test_upsample_bicubic2x(self) -> None:
        for seed, shape in enumerate([(1, 1, 3, 4), (2, 2, 2, 2), (1, 2, 4, 3)]):
            rng = Rng(50 + seed)
            x = rng.normal(size=shape)
            weights = rng.normal(size=(shape[0], shape[1], 2 * shape[2], 2 * shape[3]))

            def build(tape: Tape, xv: Var) -> Var:
                return _weighted_sum(tape, tape.upsample_bicubic2x(xv), weights)

            with self.subTest(shape=shape):
                self.assertLess(gradient_check(build, [x]), TOLERANCE)

    def test_linear_resample(self) -> None:
        h = Homography(np.array([[0.97, 0.04, 0.8], [-0.03, 1.02, -0.6], [1e-3, -5e-4, 1.0]]))
        for seed, (height, width) in enumerate([(6, 7), (5, 5), (8, 6)]):
            operator, _ = warp_operator(h, height, width, "bicubic")
            rng = Rng(60 + seed)
            x = rng.normal(size=(height, width))
            weights = rng.normal(size=(height, width))

            def build(tape: Tape, xv: Var) -> Var:
                return _weighted_sum(tape, tape.linear_resample(xv, operator, (height, width)), weights)

            with self.subTest(shape=(height, width)):
                self.assertLess(gradient_check(build, [x]), TOLERANCE)


class ConsistencyGradientTests(unittest.TestCase):
    H = Homography(np.array([[1.01, 0.02, 0.7], [-0.02, 0.99, 0.4], [5e-4, 1e-4, 1.0]]))

    def _inputs(self, seed: int, shape: tuple[int, int]) -> tuple[np.ndarray, ...]:
        rng = Rng(seed)
        return (
            rng.normal(size=shape),
            rng.normal(size=shape),
            rng.uniform(0.0, 1.0, size=shape),
            rng.uniform(0.0, 1.0, size=shape),
        )

    def test_regression_variant(self) -> None:
        for seed, shape in enumerate([(6, 7), (8, 8), (7, 9)]):
            p, p_prime, m, m_prime = self._inputs(70 + seed, shape)

            def build(tape: Tape, pv: Var, qv: Var) -> Var:
                return consistency_loss_regression(tape, pv, qv, self.H, m, m_prime, delta=1.0)

            with self.subTest(shape=shape):
                self.assertLess(gradient_check(build, [p, p_prime]), TOLERANCE)

    def test_classification_variant(self) -> None:
        for seed, shape in enumerate([(6, 7), (8, 8), (7, 9)]):
            p, p_prime, m, m_prime = self._inputs(80 + seed, shape)

            def build(tape: Tape, pv: Var, qv: Var) -> Var:
                return consistency_loss_classification(tape, pv, qv, self.H, m, m_prime)

            with self.subTest(shape=shape):
                self.assertLess(gradient_check(build, [p, p_prime]), TOLERANCE)

    def test_identity_warp_of_matching_maps_is_zero(self) -> None:
        logits = Rng(3).normal(size=(6, 6))
        tape = Tape()
        loss = consistency_loss_classification(
            tape, tape.variable(logits), tape.variable(logits), Homography.identity(), logits, logits
        )
        self.assertAlmostEqual(loss.item(), 0.0, delta=1e-9)


class AdamTests(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self) -> None:
        params = {"w": np.array([1.0, -1.0, 0.5])}
        grads = {"w": np.array([0.3, -2.0, 10.0])}
        updated, state = adam_step(params, grads, AdamState.zeros(params), lr=0.01)
        np.testing.assert_allclose(updated["w"], params["w"] - 0.01 * np.sign(grads["w"]), atol=1e-7)
        self.assertEqual(state.step, 1)

    def test_missing_gradient_passes_through(self) -> None:
        params = {"w": np.ones(2), "frozen": np.zeros(2)}
        updated, _ = adam_step(params, {"w": np.ones(2)}, AdamState.zeros(params))
        self.assertIs(updated["frozen"], params["frozen"])

    def test_shape_mismatch(self) -> None:
        params = {"w": np.ones(2)}
        with self.assertRaises(ValueError):
            adam_step(params, {"w": np.ones(3)}, AdamState.zeros(params))


if __name__ == "__main__":
    unittest.main()
