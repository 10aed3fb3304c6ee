from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .benchmark import eval_homography_suite, eval_pose_suite, eval_repeatability_suite
from .reports import EvalReport


@dataclass(frozen=True)
class Suite:
    name: str
    description: str
    inputs: str
    log_scale: bool
    runner: Callable[..., EvalReport]


SUITE_BUILDERS: dict[str, tuple[str, str, bool, Callable[..., EvalReport]]] = {
    "repeatability": (
        "Fraction of keypoints re-detected within eps pixels after the ground-truth warp, per planar pair.",
        "pairs",
        False,
        eval_repeatability_suite,
    ),
    "homography": (
        "Spatial matching plus RANSAC; a pair is correct when the mean corner error is within eps.",
        "pairs",
        False,
        eval_homography_suite,
    ),
    "pose": (
        "Stereo triangulation plus P3P RANSAC; rotation and translation error against keypoint count.",
        "scenes",
        True,
        eval_pose_suite,
    ),
}


ALIASES = {
    "rep": "repeatability",
    "repeat": "repeatability",
    "hom": "homography",
    "homography_accuracy": "homography",
    "homography-accuracy": "homography",
    "pose_error": "pose",
    "pose-error": "pose",
}


def normalize_suite_name(suite_name: str) -> str:
    key = suite_name.strip().lower()
    return ALIASES.get(key, key)


def get_suite(suite_name: str) -> Suite:
    name = normalize_suite_name(suite_name)
    if name not in SUITE_BUILDERS:
        valid = ", ".join(sorted(SUITE_BUILDERS))
        raise ValueError(f"Unknown suite '{suite_name}'. Expected one of: {valid}.")
    description, inputs, log_scale, runner = SUITE_BUILDERS[name]
    return Suite(name=name, description=description, inputs=inputs, log_scale=log_scale, runner=runner)


def list_suites() -> list[Suite]:
    return [get_suite(name) for name in sorted(SUITE_BUILDERS)]
