from __future__ import annotations

import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from fpcnet.errors import DegenerateConfigurationError, InsufficientDataError
from fpcnet.matching import RansacConfig
from fpcnet.models import Keypoint, Rng
from fpcnet.pose import (
    PinholeStereo,
    Pose,
    absolute_orientation,
    p3p_solve,
    ransac_p3p,
    reprojection_errors,
    rotation_error,
    translation_error,
    triangulate_points,
    triangulate_stereo,
)
from fpcnet.synthetic import default_stereo_camera, synth_stereo_scene


def _random_pose(rng: Rng, max_angle: float = 0.4) -> Pose:
    rotvec = rng.uniform(-1.0, 1.0, size=3)
    rotvec *= rng.uniform(0.0, max_angle) / np.linalg.norm(rotvec)
    return Pose(Rotation.from_rotvec(rotvec).as_matrix(), rng.uniform(-0.5, 0.5, size=3))


class StereoTests(unittest.TestCase):
    def test_project_triangulate_round_trip(self) -> None:
        cam = default_stereo_camera()
        points = np.column_stack(
            [Rng(0).uniform(-2, 2, 50), Rng(1).uniform(-1.5, 1.5, 50), Rng(2).uniform(4, 12, 50)]
        )
        for point in points:
            left, right = cam.project(point)
            np.testing.assert_allclose(triangulate_stereo(left, right, cam), point, atol=1e-6)
        left = cam.project_left(points)
        right = cam.project_left(points - [cam.baseline, 0.0, 0.0])
        np.testing.assert_allclose(triangulate_points(left, right, cam), points, atol=1e-6)

    def test_accepts_keypoints(self) -> None:
        cam = PinholeStereo(200.0, 80.0, 60.0, 0.5)
        point = triangulate_stereo(Keypoint(100.0, 60.0), Keypoint(90.0, 60.0), cam)
        np.testing.assert_allclose(point, [1.0, 0.0, 10.0])

    def test_rejects_row_mismatch_and_small_disparity(self) -> None:
        cam = default_stereo_camera()
        with self.assertRaises(DegenerateConfigurationError):
            triangulate_stereo((100.0, 60.0), (90.0, 65.0), cam)
        with self.assertRaises(DegenerateConfigurationError):
            triangulate_stereo((100.0, 60.0), (100.05, 60.0), cam)

    def test_camera_validation(self) -> None:
        with self.assertRaises(ValueError):
            PinholeStereo(0.0, 1.0, 1.0, 0.5)


class PoseTypeTests(unittest.TestCase):
    def test_rejects_non_rotation(self) -> None:
        with self.assertRaises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with self.assertRaises(ValueError):
            Pose(2.0 * np.eye(3), np.zeros(3))

    def test_absolute_orientation_recovers_pose(self) -> None:
        rng = Rng(12)
        pose = _random_pose(rng)
        world = rng.uniform(-2, 2, size=(10, 3))
        fitted = absolute_orientation(world, pose.transform(world))
        np.testing.assert_allclose(fitted.rotation, pose.rotation, atol=1e-10)
        np.testing.assert_allclose(fitted.translation, pose.translation, atol=1e-10)


class P3PTests(unittest.TestCase):
    def test_noise_free_recovery(self) -> None:
        cam = default_stereo_camera()
        for trial in range(25):
            rng = Rng(trial)
            pose = _random_pose(rng)
            world = np.column_stack([rng.uniform(-2, 2, 3), rng.uniform(-1.5, 1.5, 3), rng.uniform(4, 12, 3)])
            bearings = cam.bearings(cam.project_left(pose.transform(world)))
            candidates = p3p_solve(world, bearings)
            self.assertGreaterEqual(len(candidates), 1)
            self.assertLessEqual(len(candidates), 4)
            best = min(candidates, key=lambda c: rotation_error(c.rotation, pose.rotation))
            self.assertLess(rotation_error(best.rotation, pose.rotation), 1e-6)
            self.assertLess(translation_error(best.translation, pose.translation), 1e-6)

    def test_collinear_world_points(self) -> None:
        world = np.array([[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [2.0, 0.0, 5.0]])
        bearings = world / np.linalg.norm(world, axis=1, keepdims=True)
        with self.assertRaises(DegenerateConfigurationError):
            p3p_solve(world, bearings)

    def test_reprojection_zero_at_ground_truth(self) -> None:
        cam = default_stereo_camera()
        scene = synth_stereo_scene(Rng(3), cam, 20)
        errors = reprojection_errors(scene.pose_gt, scene.points, scene.left2, cam)
        self.assertLess(float(errors.max()), 1e-9)


class RansacP3PTests(unittest.TestCase):
    def test_half_outliers_recovered_in_most_trials(self) -> None:
        cam = default_stereo_camera()
        successes = 0
        for trial in range(100):
            scene = synth_stereo_scene(Rng(trial), cam, 30, outlier_fraction=0.5)
            try:
                pose, _ = ransac_p3p(scene.points, scene.left2, cam, RansacConfig(seed=trial))
            except Exception:
                continue
            if rotation_error(pose.rotation, scene.pose_gt.rotation) < 0.01:
                successes += 1
        self.assertGreaterEqual(successes, 95)

    def test_inliers_cover_clean_points(self) -> None:
        cam = default_stereo_camera()
        scene = synth_stereo_scene(Rng(41), cam, 40, outlier_fraction=0.25)
        _, inliers = ransac_p3p(scene.points, scene.left2, cam, RansacConfig(seed=1))
        self.assertTrue(set(np.flatnonzero(scene.inlier)).issubset(set(inliers.tolist())))

    def test_error_shrinks_as_inliers_grow(self) -> None:
        cam = default_stereo_camera()
        cfg = dict(min_iterations=200, max_iterations=200)
        medians = []
        for n in (10, 30, 100):
            errors = []
            for trial in range(40):
                scene = synth_stereo_scene(Rng(500 + trial), cam, n, noise_px=1.0)
                pose, _ = ransac_p3p(scene.points, scene.left2, cam, RansacConfig(seed=trial, **cfg))
                errors.append(rotation_error(pose.rotation, scene.pose_gt.rotation))
            medians.append(float(np.median(errors)))
        self.assertGreaterEqual(medians[0], medians[1])
        self.assertGreaterEqual(medians[1], medians[2])

    def test_needs_four_correspondences(self) -> None:
        cam = default_stereo_camera()
        with self.assertRaises(InsufficientDataError):
            ransac_p3p(np.ones((3, 3)), np.ones((3, 2)), cam)


class ErrorMetricTests(unittest.TestCase):
    def test_rotation_error_matches_quaternion_angle(self) -> None:
        rng = Rng(77)
        for _ in range(50):
            a = Rotation.from_rotvec(rng.uniform(-1.0, 1.0, size=3)).as_matrix()
            axis = rng.normal(size=3)
            angle = rng.uniform(0.05, 2.5)
            delta = Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()
            b = a @ delta
            oracle = Rotation.from_matrix(a.T @ b).magnitude()
            self.assertAlmostEqual(rotation_error(a, b), oracle, delta=1e-9)

    def test_identical_rotations_near_zero(self) -> None:
        rot = Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix()
        self.assertLess(rotation_error(rot, rot), 1e-7)

    def test_translation_error(self) -> None:
        self.assertAlmostEqual(translation_error(np.array([1.0, 2.0, 2.0]), np.zeros(3)), 3.0)


if __name__ == "__main__":
    unittest.main()
