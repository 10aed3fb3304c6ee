from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence
import math

import numpy as np

from .detector import DetectorParams, detector_forward
from .errors import (
    DegenerateConfigurationError,
    EstimationError,
    PointAtInfinityError,
    SingularHomographyError,
    UndefinedMetricError,
)
from .formats import load_keypoints
from .geometry import corner_error
from .heatmap import DEFAULT_NMS_RADIUS, DEFAULT_QUANTILE, extract_keypoints, top_k_keypoints
from .matching import (
    DEFAULT_MATCH_RADIUS,
    RansacConfig,
    match_payload,
    match_payload_bytes,
    matched_coordinates,
    ransac_homography,
    repeatability,
    spatial_match,
)
from .models import ImageGray, Keypoint, Rng
from .pose import ransac_p3p, rotation_error, translation_error, triangulate_stereo
from .reports import ALL_SPLIT, EvalReport
from .synthetic import PairSample, StereoScene
from .teacher import METHODS, harris_keypoints
from .tracing import EventLog, NoopTraceLogger


DEFAULT_EPS = (1.0, 3.0, 8.0)
DEFAULT_BUDGET = 300
DEFAULT_POSE_BUDGETS = (5, 10, 30, 100)
DEFAULT_PAIR_COUNT = 100
SIDES = ("a", "b")
SELECTIONS = ("topk", "quantile")
PREWARP_MODES = ("gt", "none")


class KeypointSource(Protocol):
    name: str

    def keypoints(self, pair: PairSample, side: str, budget: int) -> list[Keypoint]: ...


def _side_image(pair: PairSample, side: str) -> ImageGray:
    if side not in SIDES:
        raise ValueError(f"Unknown pair side '{side}'. Expected one of: {', '.join(SIDES)}.")
    return pair.image_a if side == "a" else pair.image_b


@dataclass(frozen=True)
class DetectorSource:
    """Keypoints from a trained network, read either as top-K or by quantile threshold."""

    params: DetectorParams
    selection: str = "topk"
    q: float = DEFAULT_QUANTILE
    nms_radius: float = DEFAULT_NMS_RADIUS
    name: str = "detector"

    def __post_init__(self) -> None:
        if self.selection not in SELECTIONS:
            raise ValueError(f"Unknown keypoint selection '{self.selection}'. Expected one of: {', '.join(SELECTIONS)}.")

    def keypoints(self, pair: PairSample, side: str, budget: int) -> list[Keypoint]:
        heatmap = detector_forward(self.params, _side_image(pair, side))
        if self.selection == "topk":
            return top_k_keypoints(heatmap, budget, self.nms_radius)
        return extract_keypoints(heatmap, self.q, self.nms_radius, budget)


@dataclass(frozen=True)
class HarrisSource:
    method: str = "harris"
    k: float = 0.04
    nms_radius: float = DEFAULT_NMS_RADIUS

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"Unknown corner method '{self.method}'. Expected one of: {', '.join(METHODS)}.")

    @property
    def name(self) -> str:
        return self.method

    def keypoints(self, pair: PairSample, side: str, budget: int) -> list[Keypoint]:
        return harris_keypoints(_side_image(pair, side), self.k, budget, self.nms_radius, self.method)  # type: ignore[arg-type]


@dataclass(frozen=True)
class OracleSource:
    """Ground-truth corners of synthetic pairs; side b holds only the corners that stay in view."""

    name: str = "oracle"

    def keypoints(self, pair: PairSample, side: str, budget: int) -> list[Keypoint]:
        _side_image(pair, side)
        corners = pair.corners_a if side == "a" else pair.corners_b
        if corners is None:
            raise ValueError(f"Pair '{pair.pair_id}' carries no ground-truth corners for the oracle source.")
        return [Keypoint(float(x), float(y), 1.0) for x, y in np.asarray(corners)[:budget]]


@dataclass(frozen=True)
class KeypointFileSource:
    """Precomputed keypoints named `<pair_id>_a.csv` / `<pair_id>_b.csv`, strongest first."""

    directory: str
    name: str = "keypoints"

    def path_for(self, pair: PairSample, side: str) -> Path:
        _side_image(pair, side)
        return Path(self.directory) / f"{pair.pair_id}_{side}.csv"

    def keypoints(self, pair: PairSample, side: str, budget: int) -> list[Keypoint]:
        kps = load_keypoints(self.path_for(pair, side))
        return sorted(kps, key=lambda kp: -kp.score)[:budget]


def _check_eps(eps_list: Sequence[float]) -> tuple[float, ...]:
    if not eps_list:
        raise ValueError("At least one eps threshold is required.")
    eps = tuple(float(e) for e in eps_list)
    for value in eps:
        if value <= 0:
            raise ValueError(f"Eps thresholds must be positive, got {value}.")
    return eps


def _splits(pair: PairSample) -> tuple[str, ...]:
    if pair.split and pair.split != ALL_SPLIT:
        return (ALL_SPLIT, pair.split)
    return (ALL_SPLIT,)


def _planar(pair: PairSample, suite: str) -> None:
    if pair.h_gt is None:
        raise ValueError(f"Pair '{pair.pair_id}' has no homography ground truth; the {suite} suite needs planar pairs.")


def _eps_text(eps: Sequence[float]) -> str:
    return ",".join(f"{e:g}" for e in eps)


def eval_repeatability_suite(
    source: KeypointSource,
    pairs: Sequence[PairSample],
    eps_list: Sequence[float] = DEFAULT_EPS,
    budget: int = DEFAULT_BUDGET,
    trace_logger: EventLog | None = None,
) -> EvalReport:
    """Per pair repeatability at each eps; pairs without detections are recorded as NaN and skipped by aggregates."""
    logger = trace_logger or NoopTraceLogger()
    eps_values = _check_eps(eps_list)
    if budget < 1:
        raise ValueError(f"Keypoint budget must be at least 1, got {budget}.")
    report = EvalReport(
        "repeatability",
        header={"source": source.name, "budget": str(budget), "eps": _eps_text(eps_values), "pairs": str(len(pairs))},
    )
    logger.log("suite.start", suite=report.suite, source=source.name, pairs=len(pairs), budget=budget)

    for pair in pairs:
        _planar(pair, report.suite)
        kps_a = source.keypoints(pair, "a", budget)
        kps_b = source.keypoints(pair, "b", budget)
        values = [math.nan] * len(eps_values)
        reason = ""
        if not kps_a or not kps_b:
            reason = "no keypoints detected on one side"
        else:
            try:
                values = [repeatability(kps_a, kps_b, pair.h_gt, eps, pair.size) for eps in eps_values]
            except UndefinedMetricError as exc:
                reason = str(exc)
        if reason:
            report.warn()
            logger.log("suite.warning", suite=report.suite, pair_id=pair.pair_id, reason=reason)
        for split in _splits(pair):
            for eps, value in zip(eps_values, values):
                report.add(pair.pair_id, "repeatability", eps, value, split=split)
        logger.log("suite.pair", suite=report.suite, pair_id=pair.pair_id, keypoints_a=len(kps_a), keypoints_b=len(kps_b))

    logger.log("suite.end", suite=report.suite, rows=len(report.rows), warnings=report.warnings)
    return report


@dataclass(frozen=True)
class HomographyOutcome:
    matches: int
    inliers: int
    payload_bytes: int
    corner_error: float


def _estimate_pair(
    source: KeypointSource,
    pair: PairSample,
    budget: int,
    match_radius: float,
    mutual: bool,
    prewarp: str,
    ransac: RansacConfig,
) -> tuple[HomographyOutcome, str]:
    kps_a = source.keypoints(pair, "a", budget)
    kps_b = source.keypoints(pair, "b", budget)
    matches = spatial_match(kps_a, kps_b, match_radius, mutual, prewarp=pair.h_gt if prewarp == "gt" else None)
    payload = match_payload(kps_a, kps_b, matches)
    if len(payload) != match_payload_bytes(matches):
        raise ValueError(f"Match payload for pair '{pair.pair_id}' carries more than coordinates.")
    width, height = pair.size
    try:
        src, dst = matched_coordinates(kps_a, kps_b, matches)
        h_est, inliers = ransac_homography(src, dst, ransac)
        error = corner_error(pair.h_gt, h_est, width, height)
    except (EstimationError, SingularHomographyError, PointAtInfinityError) as exc:
        return HomographyOutcome(len(matches), 0, len(payload), math.inf), str(exc)
    return HomographyOutcome(len(matches), len(inliers), len(payload), error), ""


def eval_homography_suite(
    source: KeypointSource,
    pairs: Sequence[PairSample],
    eps_list: Sequence[float] = DEFAULT_EPS,
    budget: int = DEFAULT_BUDGET,
    match_radius: float = DEFAULT_MATCH_RADIUS,
    mutual: bool = True,
    prewarp: str = "none",
    ransac: RansacConfig | None = None,
    trace_logger: EventLog | None = None,
) -> EvalReport:
    """Detect, match by proximity, fit with RANSAC; a failed fit counts as incorrect at every eps."""
    logger = trace_logger or NoopTraceLogger()
    eps_values = _check_eps(eps_list)
    if prewarp not in PREWARP_MODES:
        raise ValueError(f"Unknown prewarp mode '{prewarp}'. Expected one of: {', '.join(PREWARP_MODES)}.")
    ransac = ransac or RansacConfig()
    report = EvalReport(
        "homography",
        header={
            "source": source.name,
            "budget": str(budget),
            "eps": _eps_text(eps_values),
            "pairs": str(len(pairs)),
            "prewarp": prewarp,
            "mutual": str(mutual).lower(),
            "match_radius": f"{match_radius:g}",
            "ransac_threshold": f"{ransac.threshold:g}",
            "ransac_seed": str(ransac.seed),
        },
    )
    logger.log("suite.start", suite=report.suite, source=source.name, pairs=len(pairs), prewarp=prewarp)

    for pair in pairs:
        _planar(pair, report.suite)
        outcome, failure = _estimate_pair(source, pair, budget, match_radius, mutual, prewarp, ransac)
        if failure:
            logger.log("suite.warning", suite=report.suite, pair_id=pair.pair_id, reason=failure)
        for split in _splits(pair):
            for eps in eps_values:
                report.add(pair.pair_id, "accuracy", eps, float(outcome.corner_error <= eps), split=split)
            report.add(pair.pair_id, "corner_error", 0.0, outcome.corner_error, split=split)
            report.add(pair.pair_id, "matches", 0.0, outcome.matches, split=split)
            report.add(pair.pair_id, "inliers", 0.0, outcome.inliers, split=split)
            report.add(pair.pair_id, "payload_bytes", 0.0, outcome.payload_bytes, split=split)
        logger.log(
            "suite.pair",
            suite=report.suite,
            pair_id=pair.pair_id,
            matches=outcome.matches,
            inliers=outcome.inliers,
            corner_error=outcome.corner_error if math.isfinite(outcome.corner_error) else None,
        )

    logger.log("suite.end", suite=report.suite, rows=len(report.rows), warnings=report.warnings)
    return report


def _triangulated(scene: StereoScene, chosen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    world, pixels = [], []
    for index in chosen:
        try:
            world.append(triangulate_stereo(scene.left1[index], scene.right1[index], scene.cam))
        except DegenerateConfigurationError:
            continue
        pixels.append(scene.left2[index])
    return np.asarray(world, dtype=np.float64).reshape(-1, 3), np.asarray(pixels, dtype=np.float64).reshape(-1, 2)


def eval_pose_suite(
    scenes: Sequence[StereoScene],
    budgets: Sequence[int] = DEFAULT_POSE_BUDGETS,
    ransac: RansacConfig | None = None,
    seed: int = 0,
    trace_logger: EventLog | None = None,
) -> EvalReport:
    """Pose error against the number of correspondences kept.

    Each (scene, budget) draws a uniform subsample without replacement, triangulates it from the
    stereo view, and runs P3P RANSAC against the second left view. Rows use the budget as `eps`.
    """
    logger = trace_logger or NoopTraceLogger()
    if not budgets:
        raise ValueError("At least one keypoint budget is required.")
    ransac = ransac or RansacConfig()
    report = EvalReport(
        "pose",
        header={
            "budgets": ",".join(str(int(k)) for k in budgets),
            "scenes": str(len(scenes)),
            "subsample": "uniform-without-replacement",
            "seed": str(seed),
            "ransac_threshold": f"{ransac.threshold:g}",
        },
    )
    logger.log("suite.start", suite=report.suite, scenes=len(scenes), budgets=[int(k) for k in budgets])
    root = Rng(seed)

    for scene_index, scene in enumerate(scenes):
        available = len(scene.points)
        for budget_index, budget in enumerate(budgets):
            k = int(budget)
            if k < 4 or k > available:
                report.warn()
                logger.log(
                    "suite.warning",
                    suite=report.suite,
                    pair_id=scene.scene_id,
                    reason=f"budget {k} outside [4, {available}]; skipped",
                )
                continue
            chosen = np.sort(root.child(scene_index).child(budget_index).choice(available, k))
            world, pixels = _triangulated(scene, chosen)
            rot_err = trans_err = math.nan
            try:
                pose, _ = ransac_p3p(world, pixels, scene.cam, ransac)
                rot_err = rotation_error(pose.rotation, scene.pose_gt.rotation)
                trans_err = translation_error(pose.translation, scene.pose_gt.translation)
            except EstimationError as exc:
                report.warn()
                logger.log("suite.warning", suite=report.suite, pair_id=scene.scene_id, reason=str(exc))
            report.add(scene.scene_id, "rotation_error", k, rot_err)
            report.add(scene.scene_id, "translation_error", k, trans_err)
            logger.log(
                "suite.pair",
                suite=report.suite,
                pair_id=scene.scene_id,
                budget=k,
                triangulated=len(world),
                rotation_error=rot_err if math.isfinite(rot_err) else None,
            )

    logger.log("suite.end", suite=report.suite, rows=len(report.rows), warnings=report.warnings)
    return report
