from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    DegenerateConfigurationError,
    EstimationError,
    InsufficientDataError,
    SingularHomographyError,
    UndefinedMetricError,
)
from .geometry import Homography, _homogeneous_map, corner_error, hom_invert, warp_points
from .models import Keypoint, Rng, keypoints_to_array


DEFAULT_MATCH_RADIUS = 4.0
PAYLOAD_FIELDS = ("x_a", "y_a", "x_b", "y_b")
RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float

    def __post_init__(self) -> None:
        if self.index_a < 0 or self.index_b < 0:
            raise ValueError(f"Match indices must be non-negative, got ({self.index_a}, {self.index_b}).")
        if not self.distance >= 0.0:
            raise ValueError(f"Match distance must be non-negative, got {self.distance}.")

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RansacConfig:
    threshold: float = 3.0
    max_iterations: int = 2000
    confidence: float = 0.995
    seed: int = 0
    min_iterations: int = 50

    def __post_init__(self) -> None:
        if self.threshold <= 0:
            raise ValueError(f"RANSAC threshold must be positive, got {self.threshold}.")
        if self.max_iterations < 1:
            raise ValueError(f"RANSAC max_iterations must be at least 1, got {self.max_iterations}.")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError(f"RANSAC confidence must lie in (0, 1), got {self.confidence}.")
        if self.min_iterations < 0:
            raise ValueError(f"RANSAC min_iterations must be non-negative, got {self.min_iterations}.")

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


def should_stop(inlier_ratio: float, iterations: int, confidence: float, sample_size: int) -> bool:
    """Standard adaptive exit: chance of never drawing an all-inlier sample fell below 1 - confidence."""
    miss = 1.0 - inlier_ratio**sample_size
    return miss**iterations < 1.0 - confidence


def spatial_match(
    kps_a: Sequence[Keypoint],
    kps_b: Sequence[Keypoint],
    max_dist: float = DEFAULT_MATCH_RADIUS,
    mutual: bool = True,
    prewarp: Homography | None = None,
) -> list[Match]:
    """Nearest-neighbour pairing in image coordinates; no descriptors are read."""
    if max_dist <= 0:
        raise ValueError(f"max_dist must be positive, got {max_dist}.")
    if not kps_a or not kps_b:
        return []
    points_a = keypoints_to_array(kps_a)
    if prewarp is not None:
        points_a = warp_points(prewarp, points_a)
    dist = cdist(points_a, keypoints_to_array(kps_b))
    nearest_b = np.argmin(dist, axis=1)
    nearest_d = dist[np.arange(len(points_a)), nearest_b]

    if mutual:
        nearest_a = np.argmin(dist, axis=0)
        return [
            Match(int(a), int(b), float(nearest_d[a]))
            for a, b in enumerate(nearest_b)
            if nearest_a[b] == a and nearest_d[a] <= max_dist
        ]

    taken: set[int] = set()
    chosen: list[Match] = []
    for a in np.lexsort((np.arange(len(points_a)), nearest_d)):
        b = int(nearest_b[a])
        if nearest_d[a] > max_dist or b in taken:
            continue
        taken.add(b)
        chosen.append(Match(int(a), b, float(nearest_d[a])))
    return sorted(chosen, key=lambda match: match.index_a)


def _inside(points: np.ndarray, finite: np.ndarray, width: int, height: int) -> np.ndarray:
    return (
        finite
        & (points[:, 0] >= 0.0)
        & (points[:, 0] <= width - 1.0)
        & (points[:, 1] >= 0.0)
        & (points[:, 1] <= height - 1.0)
    )


def repeatability(
    kps_a: Sequence[Keypoint],
    kps_b: Sequence[Keypoint],
    h_gt: Homography,
    eps: float,
    img_size: tuple[int, int],
) -> float:
    """Fraction of keypoints in both sets with a counterpart within `eps` after the gt warp.

    `img_size` is (width, height); only points whose warp lands inside the other image count.
    """
    if eps <= 0:
        raise ValueError(f"Repeatability eps must be positive, got {eps}.")
    width, height = img_size
    points_a = keypoints_to_array(kps_a)
    points_b = keypoints_to_array(kps_b)
    a_in_b, fa = _homogeneous_map(h_gt.m, points_a)
    b_in_a, fb = _homogeneous_map(hom_invert(h_gt).m, points_b)
    keep_a = _inside(a_in_b, fa, width, height)
    keep_b = _inside(b_in_a, fb, width, height)
    total = int(keep_a.sum() + keep_b.sum())
    if total == 0:
        raise UndefinedMetricError("Repeatability is undefined: no keypoints fall inside the shared view.")

    matched = 0
    if keep_a.any() and keep_b.any():
        matched += int(np.sum(cdist(a_in_b[keep_a], points_b[keep_b]).min(axis=1) <= eps))
        matched += int(np.sum(cdist(b_in_a[keep_b], points_a[keep_a]).min(axis=1) <= eps))
    return matched / total


def _normalizing_transform(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    spread = float(np.mean(np.linalg.norm(points - centroid, axis=1)))
    if spread <= 1e-12:
        raise DegenerateConfigurationError("All correspondence points coincide.")
    scale = np.sqrt(2.0) / spread
    return np.array(
        [[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]]
    )


def _has_collinear_triple(points: np.ndarray, tol: float = 1e-8) -> bool:
    n = len(points)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                u = points[j] - points[i]
                v = points[k] - points[i]
                if abs(u[0] * v[1] - u[1] * v[0]) <= tol:
                    return True
    return False


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Hartley-normalized direct linear transform from src -> dst correspondences."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError(f"Correspondence count mismatch: {len(src)} vs {len(dst)}.")
    if len(src) < 4:
        raise InsufficientDataError(f"DLT needs at least 4 correspondences, got {len(src)}.")
    t_src = _normalizing_transform(src)
    t_dst = _normalizing_transform(dst)
    ns = src @ t_src[:2, :2].T + t_src[:2, 2]
    nd = dst @ t_dst[:2, :2].T + t_dst[:2, 2]
    if len(src) == 4 and (_has_collinear_triple(ns) or _has_collinear_triple(nd)):
        raise DegenerateConfigurationError("Three of the four correspondences are collinear.")

    ones = np.ones(len(ns))
    zeros = np.zeros((len(ns), 3))
    src_h = np.column_stack([ns, ones])
    rows_u = np.hstack([src_h, zeros, -nd[:, :1] * src_h])
    rows_v = np.hstack([zeros, src_h, -nd[:, 1:] * src_h])
    system = np.empty((2 * len(ns), 9))
    system[0::2] = rows_u
    system[1::2] = rows_v
    _, singular, vt = np.linalg.svd(system)
    if len(singular) < 8 or singular[7] <= RANK_TOLERANCE * singular[0]:
        raise DegenerateConfigurationError("Correspondences do not determine a unique homography (rank < 8).")
    normalized = vt[-1].reshape(3, 3)
    matrix = np.linalg.inv(t_dst) @ normalized @ t_src
    try:
        return Homography(matrix)
    except SingularHomographyError as exc:
        raise DegenerateConfigurationError(str(exc)) from None


def symmetric_transfer_errors(h: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-pair sqrt((d_fwd^2 + d_bwd^2) / 2); pairs mapping to infinity get +inf."""
    forward, ff = _homogeneous_map(h.m, src)
    backward, fb = _homogeneous_map(hom_invert(h).m, dst)
    d_fwd = np.sum((forward - dst) ** 2, axis=1)
    d_bwd = np.sum((backward - src) ** 2, axis=1)
    errors = np.sqrt((d_fwd + d_bwd) / 2.0)
    return np.where(ff & fb, errors, np.inf)


def matched_coordinates(
    kps_a: Sequence[Keypoint], kps_b: Sequence[Keypoint], matches: Sequence[Match]
) -> tuple[np.ndarray, np.ndarray]:
    points_a = keypoints_to_array(kps_a)
    points_b = keypoints_to_array(kps_b)
    ia = np.array([m.index_a for m in matches], dtype=np.int64)
    ib = np.array([m.index_b for m in matches], dtype=np.int64)
    return points_a[ia].reshape(-1, 2), points_b[ib].reshape(-1, 2)


def ransac_homography(
    src: np.ndarray, dst: np.ndarray, cfg: RansacConfig | None = None
) -> tuple[Homography, np.ndarray]:
    cfg = cfg or RansacConfig()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise InsufficientDataError(f"RANSAC needs at least 4 matches, got {n}.")

    rng = Rng(cfg.seed)
    best_model: Homography | None = None
    best_inliers = np.zeros(n, dtype=bool)
    best_count = 0
    best_sse = np.inf
    for iteration in range(1, cfg.max_iterations + 1):
        sample = rng.choice(n, 4)
        try:
            model = dlt_homography(src[sample], dst[sample])
            errors = symmetric_transfer_errors(model, src, dst)
        except (EstimationError, SingularHomographyError):
            continue
        inliers = errors <= cfg.threshold
        count = int(inliers.sum())
        sse = float(np.sum(errors[inliers] ** 2))
        if count > best_count or (count == best_count and count > 0 and sse < best_sse):
            best_model, best_inliers, best_count, best_sse = model, inliers, count, sse
        if (
            iteration >= cfg.min_iterations
            and best_count >= 4
            and should_stop(best_count / n, iteration, cfg.confidence, 4)
        ):
            break

    if best_model is None or best_count < 4:
        raise EstimationError(f"RANSAC found no homography with at least 4 inliers among {n} matches.")
    indices = np.flatnonzero(best_inliers)
    try:
        refit = dlt_homography(src[indices], dst[indices])
    except EstimationError:
        refit = best_model
    return refit, indices


def homography_accuracy(h_gt: Homography, h_est: Homography, eps: float, width: int, height: int) -> bool:
    if eps <= 0:
        raise ValueError(f"Accuracy eps must be positive, got {eps}.")
    return corner_error(h_gt, h_est, width, height) <= eps


def aggregate_accuracy(corner_errors: Sequence[float], eps: float) -> float:
    """Fraction of pairs whose corner error is within `eps`; failed estimates enter as +inf."""
    if not corner_errors:
        raise UndefinedMetricError("Homography accuracy is undefined over zero pairs.")
    errors = np.asarray(corner_errors, dtype=np.float64)
    return float(np.mean(errors <= eps))


def match_payload(kps_a: Sequence[Keypoint], kps_b: Sequence[Keypoint], matches: Sequence[Match]) -> bytes:
    """Serialized correspondences: four little-endian float32 coordinates per match, nothing else."""
    points_a, points_b = matched_coordinates(kps_a, kps_b, matches)
    return np.hstack([points_a, points_b]).astype("<f4").tobytes()


def match_payload_bytes(matches: Sequence[Match]) -> int:
    return 4 * len(PAYLOAD_FIELDS) * len(matches)
