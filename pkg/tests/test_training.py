from __future__ import annotations

import tempfile
import unittest
from unittest import mock

import numpy as np

from fpcnet import training
from fpcnet.checkpoint import load_checkpoint, save_checkpoint
from fpcnet.detector import DetectorConfig, build_detector
from fpcnet.errors import DivergenceError
from fpcnet.geometry import HomographySamplerConfig
from fpcnet.heatmap import TargetMask
from fpcnet.models import Rng
from fpcnet.synthetic import synthetic_images
from fpcnet.teacher import harris_teacher
from fpcnet.tracing import TraceLogger, read_trace
from fpcnet.training import (
    LOSS_HEADER,
    TrainConfig,
    TrainingSample,
    batch_indices,
    consistency_residual,
    loss_csv,
    stage2_targets,
    train_stage1,
    train_stage2,
)

TINY = DetectorConfig(widths=(2, 3, 4, 6), fpn_width=4, input_height=32, input_width=32)


def _dataset(count: int, seed: int = 0) -> list[TrainingSample]:
    images = synthetic_images(count, seed, width=32, height=32, n_shapes=3)
    return [TrainingSample(img, harris_teacher(img, top_n=20, nms_radius=2.0)) for img in images]


class BatchingTests(unittest.TestCase):
    def test_trailing_singleton_joins_previous_batch(self) -> None:
        chunks = batch_indices(np.arange(5), 2)
        self.assertEqual([c.tolist() for c in chunks], [[0, 1], [2, 3, 4]])

    def test_even_split_and_short_dataset(self) -> None:
        self.assertEqual([c.tolist() for c in batch_indices(np.arange(4), 2)], [[0, 1], [2, 3]])
        self.assertEqual([c.tolist() for c in batch_indices(np.arange(3), 8)], [[0, 1, 2]])

    def test_config_validation(self) -> None:
        with self.assertRaises(ValueError):
            TrainConfig(batch_size=1)
        with self.assertRaises(ValueError):
            TrainConfig(epochs1=0)
        with self.assertRaises(ValueError):
            TrainConfig(consistency_weight=-0.5)
        with self.assertRaises(ValueError):
            TrainConfig(loss_mode="ranking")


class StageOneTests(unittest.TestCase):
    def test_loss_rows_per_batch_and_csv(self) -> None:
        tcfg = TrainConfig(epochs1=2, batch_size=2, lr=1e-2)
        result = train_stage1(_dataset(5), build_detector(TINY, Rng(0)), tcfg)
        self.assertEqual(len(result.trace), 4)
        self.assertTrue(all(np.isfinite(row.loss) for row in result.trace))
        text = loss_csv(result.trace)
        lines = text.splitlines()
        self.assertEqual(lines[0], LOSS_HEADER)
        self.assertEqual(len(lines), 5)
        self.assertTrue(lines[1].startswith("1,0,0,"))

    def test_same_seed_reproduces_trace(self) -> None:
        tcfg = TrainConfig(epochs1=2, batch_size=2, seed=3)
        data = _dataset(4)
        first = train_stage1(data, build_detector(TINY, Rng(1)), tcfg)
        second = train_stage1(data, build_detector(TINY, Rng(1)), tcfg)
        self.assertEqual([r.loss for r in first.trace], [r.loss for r in second.trace])
        self.assertTrue(first.params.equals(second.params))

    def test_loss_decreases_when_overfitting(self) -> None:
        tcfg = TrainConfig(epochs1=30, batch_size=2, lr=1e-2)
        result = train_stage1(_dataset(4), build_detector(TINY, Rng(2)), tcfg)
        losses = result.epoch_losses(1)
        self.assertEqual(len(losses), 30)
        self.assertLess(losses[-1], losses[0])

    def test_running_stats_are_updated(self) -> None:
        params = build_detector(TINY, Rng(0))
        result = train_stage1(_dataset(4), params, TrainConfig(epochs1=1, batch_size=2))
        self.assertFalse(np.array_equal(result.params.tensors["stage1.bn.running_mean"], params.tensors["stage1.bn.running_mean"]))

    def test_divergence_is_reported(self) -> None:
        def poisoned(tape, logits, *args, **kwargs):
            return tape.record(np.array(np.nan), lambda g: None)

        with mock.patch.object(training, "focal_loss", poisoned):
            with self.assertRaises(DivergenceError):
                train_stage1(_dataset(2), build_detector(TINY, Rng(0)), TrainConfig(epochs1=1, batch_size=2))

    def test_rejects_single_sample_and_mixed_shapes(self) -> None:
        data = _dataset(2)
        with self.assertRaises(ValueError):
            train_stage1(data[:1], build_detector(TINY, Rng(0)), TrainConfig())
        odd = synthetic_images(1, 5, width=40, height=32, n_shapes=2)[0]
        mixed = [data[0], TrainingSample(odd, TargetMask.empty(32, 40))]
        with self.assertRaises(ValueError):
            train_stage1(mixed, build_detector(TINY, Rng(0)), TrainConfig())

    def test_trace_events(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            with TraceLogger.in_directory(tmp) as logger:
                train_stage1(_dataset(2), build_detector(TINY, Rng(0)), TrainConfig(epochs1=1, batch_size=2), logger)
            events = read_trace(logger.path)
        self.assertEqual(events[0]["event_type"], "train.start")
        self.assertEqual(events[-1]["event_type"], "train.end")
        self.assertEqual(sum(1 for e in events if e["event_type"] == "train.batch"), 1)


class StageTwoTests(unittest.TestCase):
    def test_targets_are_smoothed_and_label_smoothed(self) -> None:
        values = np.zeros((9, 9))
        values[4, 4] = 1.0
        target = stage2_targets(TargetMask(values, "binary"), TrainConfig(smoothing_eps=0.1))
        self.assertEqual(target.kind, "smoothed")
        self.assertGreaterEqual(float(target.values.min()), 0.1 - 1e-12)
        self.assertLessEqual(float(target.values.max()), 0.9 + 1e-12)

    def test_consistency_weight_only_adds_to_loss(self) -> None:
        data = _dataset(4)
        params = build_detector(TINY, Rng(4))
        plain = train_stage2(data, params, TrainConfig(epochs2=1, batch_size=2, consistency_weight=0.0))
        weighted = train_stage2(data, params, TrainConfig(epochs2=1, batch_size=2, consistency_weight=1.0))
        self.assertGreater(weighted.trace[0].loss, plain.trace[0].loss)
        self.assertEqual(len(plain.trace), len(weighted.trace))

    def test_resume_from_checkpoint_matches_in_memory_run(self) -> None:
        data = _dataset(4)
        tcfg = TrainConfig(epochs1=1, epochs2=1, batch_size=2)
        stage1 = train_stage1(data, build_detector(TINY, Rng(5)), tcfg).params
        direct = train_stage2(data, stage1, tcfg)
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(tmp, stage1)
            resumed = train_stage2(data, load_checkpoint(tmp), tcfg)
        self.assertEqual([r.loss for r in direct.trace], [r.loss for r in resumed.trace])
        self.assertTrue(direct.params.equals(resumed.params))

    def test_classification_mode_stays_finite(self) -> None:
        tcfg = TrainConfig(epochs2=2, batch_size=2, loss_mode="classification", consistency_target="binary")
        result = train_stage2(_dataset(4), build_detector(TINY, Rng(6)), tcfg)
        self.assertEqual(len(result.trace), 4)
        self.assertTrue(all(np.isfinite(row.loss) for row in result.trace))
        self.assertTrue(all(row.stage == 2 for row in result.trace))


    def test_held_out_residual_is_zero_without_motion(self) -> None:
        params = build_detector(TINY, Rng(7))
        images = synthetic_images(2, 5, width=32, height=32, n_shapes=3)
        self.assertAlmostEqual(consistency_residual(params, images, HomographySamplerConfig.zero(), seed=0), 0.0, places=9)
        moved = consistency_residual(params, images, HomographySamplerConfig(), seed=0)
        self.assertTrue(0.0 <= moved <= 1.0)

if __name__ == "__main__":
    unittest.main()
