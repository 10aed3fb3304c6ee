from __future__ import annotations

import math
import unittest

import numpy as np

from fpcnet.heatmap import gaussian_kernel1d
from fpcnet.models import ImageGray, Rng
from fpcnet.teacher import corner_response, harris_keypoints, harris_teacher


def _white_square(size: int = 40, lo: int = 10, hi: int = 29) -> ImageGray:
    pixels = np.zeros((size, size))
    pixels[lo : hi + 1, lo : hi + 1] = 1.0
    return ImageGray(pixels)


def _naive_response(pixels: np.ndarray, k: float) -> np.ndarray:
    height, width = pixels.shape
    padded = np.pad(pixels, 1, mode="symmetric")
    gx = np.zeros_like(pixels)
    gy = np.zeros_like(pixels)
    smooth = (1.0, 2.0, 1.0)
    for y in range(height):
        for x in range(width):
            for offset in range(3):
                gx[y, x] += smooth[offset] * (padded[y + offset, x + 2] - padded[y + offset, x])
                gy[y, x] += smooth[offset] * (padded[y + 2, x + offset] - padded[y, x + offset])
    kernel = gaussian_kernel1d(1.0)
    radius = len(kernel) // 2

    def blur(values: np.ndarray) -> np.ndarray:
        padded_values = np.pad(values, radius, mode="symmetric")
        out = np.zeros_like(values)
        for y in range(height):
            for x in range(width):
                total = 0.0
                for i in range(len(kernel)):
                    for j in range(len(kernel)):
                        total += kernel[i] * kernel[j] * padded_values[y + i, x + j]
                out[y, x] = total
        return out

    sxx, sxy, syy = blur(gx * gx), blur(gx * gy), blur(gy * gy)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


class CornerResponseTests(unittest.TestCase):
    def test_matches_direct_structure_tensor(self) -> None:
        pixels = Rng(2).uniform(0.0, 1.0, size=(12, 14))
        np.testing.assert_allclose(corner_response(ImageGray(pixels), 0.04), _naive_response(pixels, 0.04), atol=1e-5)

    def test_unknown_method(self) -> None:
        with self.assertRaises(ValueError):
            corner_response(_white_square(), method="fast")


class HarrisTeacherTests(unittest.TestCase):
    def test_square_corners_are_strongest(self) -> None:
        corners = [(10, 10), (29, 10), (10, 29), (29, 29)]
        for method in ("harris", "shi-tomasi"):
            kps = harris_keypoints(_white_square(), top_n=8, nms_radius=4.0, method=method)
            self.assertLessEqual(len(kps), 8)
            for cx, cy in corners:
                with self.subTest(method=method, corner=(cx, cy)):
                    nearest = min(math.hypot(kp.x - cx, kp.y - cy) for kp in kps)
                    self.assertLessEqual(nearest, 2.0)

    def test_constant_image_gives_empty_mask(self) -> None:
        mask = harris_teacher(ImageGray(np.full((16, 16), 0.5)))
        self.assertEqual(mask.positives, 0)
        self.assertEqual(mask.kind, "binary")

    def test_mask_marks_top_n_pixels(self) -> None:
        mask = harris_teacher(_white_square(), top_n=4, nms_radius=4.0)
        self.assertEqual(mask.positives, 4)
        self.assertEqual(mask.shape, (40, 40))

    def test_scores_are_normalized(self) -> None:
        kps = harris_keypoints(_white_square(), top_n=4)
        self.assertAlmostEqual(kps[0].score, 1.0)
        self.assertTrue(all(0.0 < kp.score <= 1.0 for kp in kps))

    def test_top_n_validation(self) -> None:
        with self.assertRaises(ValueError):
            harris_keypoints(_white_square(), top_n=0)


if __name__ == "__main__":
    unittest.main()
