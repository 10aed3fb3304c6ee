from __future__ import annotations

from typing import Literal

import numpy as np
from scipy import ndimage

from .heatmap import TargetMask, gaussian_kernel1d, greedy_nms
from .models import ImageGray, Keypoint


Method = Literal["harris", "shi-tomasi"]
METHODS = ("harris", "shi-tomasi")
RESPONSE_FLOOR = 1e-12


def structure_tensor(img: ImageGray, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian-smoothed (Ixx, Ixy, Iyy) from Sobel gradients."""
    gx = ndimage.sobel(img.pixels, axis=1, mode="reflect")
    gy = ndimage.sobel(img.pixels, axis=0, mode="reflect")
    kernel = gaussian_kernel1d(sigma)

    def smooth(values: np.ndarray) -> np.ndarray:
        values = ndimage.correlate1d(values, kernel, axis=0, mode="reflect")
        return ndimage.correlate1d(values, kernel, axis=1, mode="reflect")

    return smooth(gx * gx), smooth(gx * gy), smooth(gy * gy)


def corner_response(img: ImageGray, k: float = 0.04, method: Method = "harris", sigma: float = 1.0) -> np.ndarray:
    if method not in METHODS:
        raise ValueError(f"Unknown corner method '{method}'. Expected one of: {', '.join(METHODS)}.")
    sxx, sxy, syy = structure_tensor(img, sigma)
    if method == "harris":
        return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    half_gap = (sxx - syy) / 2.0
    return (sxx + syy) / 2.0 - np.sqrt(half_gap * half_gap + sxy * sxy)


def harris_keypoints(
    img: ImageGray,
    k: float = 0.04,
    top_n: int = 300,
    nms_radius: float = 4.0,
    method: Method = "harris",
) -> list[Keypoint]:
    """Strongest positive corner responses after NMS; scores are responses over the image maximum."""
    if top_n < 1:
        raise ValueError(f"top_n must be at least 1, got {top_n}.")
    response = corner_response(img, k, method)
    rows, cols = np.nonzero(response > RESPONSE_FLOOR)
    if len(rows) == 0:
        return []
    scores = response[rows, cols]
    points = np.stack([cols, rows], axis=1).astype(np.float64)
    keep = greedy_nms(points, scores, nms_radius, top_n)
    peak = float(scores.max())
    return [Keypoint(float(cols[i]), float(rows[i]), float(np.clip(scores[i] / peak, 0.0, 1.0))) for i in keep]


def harris_teacher(
    img: ImageGray,
    k: float = 0.04,
    top_n: int = 300,
    nms_radius: float = 4.0,
    method: Method = "harris",
) -> TargetMask:
    mask = np.zeros((img.height, img.width))
    for kp in harris_keypoints(img, k, top_n, nms_radius, method):
        mask[int(kp.y), int(kp.x)] = 1.0
    return TargetMask(mask, "binary")
