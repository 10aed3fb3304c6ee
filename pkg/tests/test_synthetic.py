from __future__ import annotations

from pathlib import Path
import tempfile
import unittest

import numpy as np

from fpcnet.errors import FormatError
from fpcnet.geometry import Homography, HomographySamplerConfig, warp_points
from fpcnet.models import Rng
from fpcnet.pose import Pose
from fpcnet.synthetic import (
    PairSample,
    SHAPE_KINDS,
    PhotometricConfig,
    apply_photometric,
    load_pair_dir,
    make_pair,
    save_pair_dir,
    synth_scene,
    synth_shapes,
    synth_stereo_scene,
    synthetic_images,
    synthetic_pairs,
    synthetic_stereo_scenes,
    default_stereo_camera,
)


class SceneTests(unittest.TestCase):
    def test_corners_cover_every_shape_vertex(self) -> None:
        img, corners = synth_scene(Rng(0), 160, 120, 6)
        shapes = synth_shapes(Rng(0).child(1), 160, 120, 6)
        self.assertEqual(len(corners), sum(len(shape.vertices) for shape in shapes))
        self.assertEqual(corners.shape[1], 2)
        self.assertEqual((img.height, img.width), (120, 160))
        self.assertTrue(np.all((corners[:, 0] >= 0) & (corners[:, 0] <= 159)))
        self.assertTrue(np.all((corners[:, 1] >= 0) & (corners[:, 1] <= 119)))

    def test_deterministic_under_seed(self) -> None:
        first = synthetic_images(3, 11, 64, 48, 4)
        second = synthetic_images(3, 11, 64, 48, 4)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.pixels, b.pixels)
        self.assertFalse(np.array_equal(first[0].pixels, first[1].pixels))

    def test_images_have_structure(self) -> None:
        img, _ = synth_scene(Rng(3), 64, 48, 4)
        self.assertGreater(float(img.pixels.std()), 0.01)

    def test_smallest_scenes_fit_every_shape_kind(self) -> None:
        for kind in SHAPE_KINDS:
            for width, height in ((16, 16), (16, 40), (24, 17)):
                for seed in range(5):
                    img, corners = synth_scene(Rng(seed), width, height, 2, kinds=(kind,))
                    self.assertEqual((img.height, img.width), (height, width))
                    self.assertTrue(np.all((corners[:, 0] >= 0) & (corners[:, 0] <= width - 1)), kind)
                    self.assertTrue(np.all((corners[:, 1] >= 0) & (corners[:, 1] <= height - 1)), kind)

    def test_too_small_scene_is_rejected(self) -> None:
        with self.assertRaisesRegex(ValueError, "at least 16 pixels"):
            synth_scene(Rng(0), 8, 8, 1, kinds=("triangle",))
        with self.assertRaises(ValueError):
            synth_scene(Rng(0), 64, 15, 1)


class PairTests(unittest.TestCase):
    def test_identity_pair(self) -> None:
        img, corners = synth_scene(Rng(1), 64, 48, 3)
        pair = make_pair(img, HomographySamplerConfig.zero(), PhotometricConfig.identity(), Rng(2), corners=corners)
        np.testing.assert_array_equal(pair.h_gt.m, np.eye(3))
        np.testing.assert_allclose(pair.image_b.pixels, img.pixels, atol=1e-12)
        np.testing.assert_allclose(pair.corners_b, corners, atol=1e-9)

    def test_corners_b_follow_homography(self) -> None:
        pair = synthetic_pairs(1, 4, 64, 48, 4)[0]
        moved = warp_points(pair.h_gt, pair.corners_a)
        inside = (moved[:, 0] >= 0) & (moved[:, 0] <= 63) & (moved[:, 1] >= 0) & (moved[:, 1] <= 47)
        np.testing.assert_allclose(pair.corners_b, moved[inside], atol=1e-9)
        self.assertEqual(pair.size, (64, 48))

    def test_pairs_need_exactly_one_ground_truth(self) -> None:
        img, _ = synth_scene(Rng(1), 32, 32, 2)
        with self.assertRaises(ValueError):
            PairSample("p", img, img)
        with self.assertRaises(ValueError):
            PairSample("p", img, img, h_gt=Homography.identity(), pose_gt=Pose.identity())

    def test_photometric_stays_in_range(self) -> None:
        img, _ = synth_scene(Rng(5), 32, 32, 2)
        cfg = PhotometricConfig(gain_range=(0.5, 2.0), bias_range=(-0.3, 0.3), noise_max=0.1, blur_sigma_max=1.0)
        out = apply_photometric(img, cfg, Rng(6))
        self.assertGreaterEqual(float(out.pixels.min()), 0.0)
        self.assertLessEqual(float(out.pixels.max()), 1.0)
        with self.assertRaises(ValueError):
            PhotometricConfig(gain_range=(1.2, 0.8))


class PairDirectoryTests(unittest.TestCase):
    def test_round_trip(self) -> None:
        pairs = synthetic_pairs(2, 8, 32, 24, 3)
        pairs[1] = PairSample(pairs[1].pair_id, pairs[1].image_a, pairs[1].image_b, h_gt=pairs[1].h_gt, split="viewpoint")
        with tempfile.TemporaryDirectory() as tmp:
            save_pair_dir(pairs, tmp)
            names = sorted(path.name for path in Path(tmp).iterdir())
            loaded = load_pair_dir(tmp)
        self.assertIn("syn0000_a.pgm", names)
        self.assertIn("syn0001.tag", names)
        self.assertEqual([p.pair_id for p in loaded], ["syn0000", "syn0001"])
        self.assertEqual([p.split for p in loaded], ["", "viewpoint"])
        np.testing.assert_array_equal(loaded[0].h_gt.m, pairs[0].h_gt.m)
        np.testing.assert_allclose(loaded[0].image_a.pixels, pairs[0].image_a.pixels, atol=0.5 / 255 + 1e-9)

    def test_missing_directory_and_image(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FormatError):
                load_pair_dir(Path(tmp) / "absent")
            with self.assertRaises(FormatError):
                load_pair_dir(tmp)
            save_pair_dir(synthetic_pairs(1, 0, 32, 24, 2), tmp)
            (Path(tmp) / "syn0000_b.pgm").unlink()
            with self.assertRaises(FormatError):
                load_pair_dir(tmp)


class StereoSceneTests(unittest.TestCase):
    def test_outlier_fraction_and_shapes(self) -> None:
        scene = synth_stereo_scene(Rng(0), default_stereo_camera(), 40, outlier_fraction=0.25)
        self.assertEqual(scene.points.shape, (40, 3))
        self.assertEqual(scene.left2.shape, (40, 2))
        self.assertEqual(int((~scene.inlier).sum()), 10)

    def test_clean_scene_is_consistent(self) -> None:
        cam = default_stereo_camera()
        scene = synth_stereo_scene(Rng(1), cam, 25)
        np.testing.assert_allclose(scene.left2, cam.project_left(scene.pose_gt.transform(scene.points)), atol=1e-9)
        np.testing.assert_allclose(scene.left1[:, 1], scene.right1[:, 1], atol=1e-9)

    def test_scene_list_is_deterministic(self) -> None:
        first = synthetic_stereo_scenes(3, 5, n_points=12)
        second = synthetic_stereo_scenes(3, 5, n_points=12)
        self.assertEqual([s.scene_id for s in first], ["stereo0000", "stereo0001", "stereo0002"])
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.points, b.points)

    def test_validation(self) -> None:
        with self.assertRaises(ValueError):
            synth_stereo_scene(Rng(0), default_stereo_camera(), 0)
        with self.assertRaises(ValueError):
            synth_stereo_scene(Rng(0), default_stereo_camera(), 10, outlier_fraction=1.0)


if __name__ == "__main__":
    unittest.main()
