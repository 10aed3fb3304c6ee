from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence
import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import expit

from .models import Keypoint, Tensor, _readonly, keypoint_scores, keypoints_to_array


MaskKind = Literal["binary", "smoothed"]
MASK_KINDS = ("binary", "smoothed")

DEFAULT_QUANTILE = 0.999
DEFAULT_NMS_RADIUS = 4.0
DEFAULT_MAX_K = 300
DEFAULT_SIGMA = 1.0
DEFAULT_SMOOTHING = 0.1

_SCORE_FLOOR = float(np.nextafter(np.float32(0.0), np.float32(1.0)))
_SCORE_CEIL = float(np.nextafter(np.float32(1.0), np.float32(0.0)))


def sigmoid(values: np.ndarray | float) -> np.ndarray | float:
    return expit(values)


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Raw pre-sigmoid detector scores at image resolution."""

    logits: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.logits, dtype=np.float64)
        if array.ndim == 3 and array.shape[0] == 1:
            array = array[0]
        if array.ndim != 2 or array.size == 0:
            raise ValueError(f"Heatmap expects a non-empty 2-D array, got shape {array.shape}.")
        if not np.all(np.isfinite(array)):
            raise ValueError("Heatmap logits must be finite.")
        object.__setattr__(self, "logits", _readonly(array))

    @property
    def height(self) -> int:
        return int(self.logits.shape[0])

    @property
    def width(self) -> int:
        return int(self.logits.shape[1])

    def probabilities(self) -> np.ndarray:
        return expit(self.logits)

    def to_tensor(self) -> Tensor:
        return Tensor(self.logits)

    @classmethod
    def from_tensor(cls, tensor: Tensor) -> "Heatmap":
        return cls(tensor.values)


@dataclass(frozen=True, eq=False)
class TargetMask:
    values: np.ndarray
    kind: MaskKind = "binary"

    def __post_init__(self) -> None:
        if self.kind not in MASK_KINDS:
            raise ValueError(f"Unknown mask kind '{self.kind}'. Expected one of: {', '.join(MASK_KINDS)}.")
        array = np.asarray(self.values, dtype=np.float64)
        if array.ndim == 3 and array.shape[0] == 1:
            array = array[0]
        if array.ndim != 2:
            raise ValueError(f"TargetMask expects a 2-D array, got shape {array.shape}.")
        if not np.all(np.isfinite(array)) or array.min() < 0.0 or array.max() > 1.0:
            raise ValueError("TargetMask values must lie in [0, 1].")
        if self.kind == "binary" and not np.all((array == 0.0) | (array == 1.0)):
            raise ValueError("Binary TargetMask entries must be 0 or 1.")
        object.__setattr__(self, "values", _readonly(array))

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))

    @property
    def positives(self) -> int:
        return int(np.count_nonzero(self.values > 0.5))

    def to_tensor(self) -> Tensor:
        return Tensor(self.values)

    @classmethod
    def from_tensor(cls, tensor: Tensor) -> "TargetMask":
        values = tensor.values
        binary = bool(np.all((values == 0.0) | (values == 1.0)))
        return cls(values, "binary" if binary else "smoothed")

    @classmethod
    def empty(cls, height: int, width: int) -> "TargetMask":
        return cls(np.zeros((height, width)), "binary")


def quantile_threshold(hm: Heatmap, q: float) -> TargetMask:
    if not (0.0 < q < 1.0):
        raise ValueError(f"Quantile q must lie in (0, 1), got {q}.")
    threshold = np.quantile(hm.logits, q, method="linear")
    return TargetMask((hm.logits > threshold).astype(np.float64), "binary")


def greedy_nms(points: np.ndarray, scores: np.ndarray, radius: float, max_k: int | None = None) -> np.ndarray:
    """Indices kept by greedy suppression, strongest first; ties resolve by (y, x)."""
    if radius < 0:
        raise ValueError(f"NMS radius must be non-negative, got {radius}.")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    limit = len(points) if max_k is None else max(int(max_k), 0)
    if len(points) == 0 or limit == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((points[:, 0], points[:, 1], -scores))
    tree = cKDTree(points)
    suppressed = np.zeros(len(points), dtype=bool)
    kept: list[int] = []
    for index in order:
        if suppressed[index]:
            continue
        kept.append(int(index))
        if len(kept) >= limit:
            break
        suppressed[tree.query_ball_point(points[index], r=radius)] = True
    return np.array(kept, dtype=np.int64)


def nms(kps: Sequence[Keypoint], radius: float, max_k: int | None = None) -> list[Keypoint]:
    kps = list(kps)
    keep = greedy_nms(keypoints_to_array(kps), keypoint_scores(kps), radius, max_k)
    return [kps[i] for i in keep]


def _candidates_to_keypoints(hm: Heatmap, rows: np.ndarray, cols: np.ndarray, radius: float, max_k: int | None) -> list[Keypoint]:
    scores = np.clip(expit(hm.logits[rows, cols]), _SCORE_FLOOR, _SCORE_CEIL)
    points = np.stack([cols, rows], axis=1).astype(np.float64)
    keep = greedy_nms(points, scores, radius, max_k)
    return [Keypoint(float(cols[i]), float(rows[i]), float(scores[i])) for i in keep]


def extract_keypoints(
    hm: Heatmap,
    q: float = DEFAULT_QUANTILE,
    nms_radius: float = DEFAULT_NMS_RADIUS,
    max_k: int | None = DEFAULT_MAX_K,
) -> list[Keypoint]:
    mask = quantile_threshold(hm, q)
    rows, cols = np.nonzero(mask.values)
    return _candidates_to_keypoints(hm, rows, cols, nms_radius, max_k)


def top_k_keypoints(hm: Heatmap, k: int = DEFAULT_MAX_K, nms_radius: float = DEFAULT_NMS_RADIUS) -> list[Keypoint]:
    rows, cols = np.indices(hm.logits.shape)
    return _candidates_to_keypoints(hm, rows.ravel(), cols.ravel(), nms_radius, k)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"Gaussian sigma must be positive, got {sigma}.")
    half = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_filter(mask: TargetMask, sigma: float = DEFAULT_SIGMA) -> TargetMask:
    kernel = gaussian_kernel1d(sigma)
    smoothed = ndimage.correlate1d(mask.values, kernel, axis=0, mode="reflect")
    smoothed = ndimage.correlate1d(smoothed, kernel, axis=1, mode="reflect")
    return TargetMask(np.clip(smoothed, 0.0, 1.0), "smoothed")


def label_smooth(mask: TargetMask, eps: float = DEFAULT_SMOOTHING) -> TargetMask:
    if not (0.0 <= eps < 0.5):
        raise ValueError(f"Label smoothing eps must lie in [0, 0.5), got {eps}.")
    if eps == 0.0:
        return mask
    values = mask.values * (1.0 - eps) + (1.0 - mask.values) * eps
    return TargetMask(np.clip(values, 0.0, 1.0), "smoothed")


def activation_histogram(hm: Heatmap, bins: int, lo: float, hi: float) -> list[tuple[float, int]]:
    if bins < 1:
        raise ValueError(f"Histogram needs at least one bin, got {bins}.")
    if not lo < hi:
        raise ValueError(f"Histogram range must satisfy lo < hi, got [{lo}, {hi}].")
    width = (hi - lo) / bins
    index = np.floor((hm.logits.ravel() - lo) / width)
    index = np.clip(index, 0, bins - 1).astype(np.int64)
    counts = np.bincount(index, minlength=bins)
    return [(lo + (i + 0.5) * width, int(counts[i])) for i in range(bins)]


def fraction_above_zero(hm: Heatmap) -> float:
    return float(np.mean(hm.logits > 0.0))
