from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .errors import DegenerateConfigurationError, EstimationError, InsufficientDataError
from .matching import RansacConfig, should_stop
from .models import Keypoint, Rng, _readonly


ORTHO_TOL = 1e-9
MIN_DISPARITY = 0.1
MAX_ROW_MISMATCH = 2.0
ROOT_IMAG_TOL = 1e-6
CONSTRAINT_TOL = 1e-6
BEARING_TOL = 1e-6


@dataclass(frozen=True)
class PinholeStereo:
    """Rectified left/right pair; the right camera sits `baseline` metres along +X."""

    focal: float
    cx: float
    cy: float
    baseline: float

    def __post_init__(self) -> None:
        if self.focal <= 0:
            raise ValueError(f"Stereo focal length must be positive, got {self.focal}.")
        if self.baseline <= 0:
            raise ValueError(f"Stereo baseline must be positive, got {self.baseline}.")

    def project_left(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if np.any(points[:, 2] <= 0):
            raise ValueError("Cannot project points at or behind the camera plane.")
        return np.stack(
            [self.focal * points[:, 0] / points[:, 2] + self.cx, self.focal * points[:, 1] / points[:, 2] + self.cy],
            axis=1,
        )

    def project(self, point: np.ndarray) -> tuple[tuple[float, float], tuple[float, float]]:
        x, y, z = (float(v) for v in point)
        left = self.project_left(np.array([x, y, z]))[0]
        right = self.project_left(np.array([x - self.baseline, y, z]))[0]
        return (float(left[0]), float(left[1])), (float(right[0]), float(right[1]))

    def bearings(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        rays = np.column_stack(
            [(pixels[:, 0] - self.cx) / self.focal, (pixels[:, 1] - self.cy) / self.focal, np.ones(len(pixels))]
        )
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def bearing(self, pixel: tuple[float, float]) -> np.ndarray:
        return self.bearings(np.array([pixel]))[0]

    def as_dict(self) -> dict[str, Any]:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "baseline": self.baseline}


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-from-world rigid transform: x_cam = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ValueError(f"Pose expects a 3x3 rotation and 3-vector translation, got {rot.shape} and {trans.shape}.")
        if not np.allclose(rot.T @ rot, np.eye(3), rtol=0.0, atol=ORTHO_TOL):
            raise ValueError("Pose rotation is not orthonormal.")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise ValueError("Pose rotation must have determinant +1.")
        object.__setattr__(self, "rotation", _readonly(rot))
        object.__setattr__(self, "translation", _readonly(trans))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.rotation.T + self.translation

    def as_dict(self) -> dict[str, Any]:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


def _xy(point: Keypoint | Sequence[float]) -> tuple[float, float]:
    if isinstance(point, Keypoint):
        return point.x, point.y
    return float(point[0]), float(point[1])


def triangulate_stereo(kp_left: Keypoint | Sequence[float], kp_right: Keypoint | Sequence[float], cam: PinholeStereo) -> np.ndarray:
    (xl, yl), (xr, yr) = _xy(kp_left), _xy(kp_right)
    if abs(yl - yr) > MAX_ROW_MISMATCH:
        raise DegenerateConfigurationError(
            f"Stereo rows differ by {abs(yl - yr):.3f} px; rectified pairs allow at most {MAX_ROW_MISMATCH} px."
        )
    disparity = xl - xr
    if disparity <= MIN_DISPARITY:
        raise DegenerateConfigurationError(f"Disparity {disparity:.4f} px is too small to triangulate.")
    z = cam.focal * cam.baseline / disparity
    return np.array([(xl - cam.cx) * z / cam.focal, (yl - cam.cy) * z / cam.focal, z])


def triangulate_points(left: np.ndarray, right: np.ndarray, cam: PinholeStereo) -> np.ndarray:
    left = np.asarray(left, dtype=np.float64).reshape(-1, 2)
    right = np.asarray(right, dtype=np.float64).reshape(-1, 2)
    return np.array([triangulate_stereo(l, r, cam) for l, r in zip(left, right)]).reshape(-1, 3)


def absolute_orientation(world: np.ndarray, camera: np.ndarray) -> Pose:
    """Least-squares rigid fit camera ~ R @ world + t (Kabsch, reflection-corrected)."""
    mu_w = world.mean(axis=0)
    mu_c = camera.mean(axis=0)
    cross = (world - mu_w).T @ (camera - mu_c)
    u, _, vt = np.linalg.svd(cross)
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(vt.T @ u.T)) or 1.0])
    rotation = vt.T @ fix @ u.T
    return Pose(rotation, mu_c - rotation @ mu_w)


def _depth_ratio_quartic(a2: float, b2: float, c2: float, ca: float, cb: float, cg: float) -> tuple[Polynomial, Polynomial, Polynomial]:
    # With s2 = u*s1 and s3 = v*s1, eliminate s1 between the three law-of-cosines
    # constraints, leaving two quadratics in u whose resultant is a quartic in v.
    v = Polynomial([0.0, 1.0])
    base = 1.0 + v * v - 2.0 * cb * v
    p2 = b2
    p1 = Polynomial([-2.0 * b2 * cg])
    p0 = b2 - c2 * base
    q2 = b2
    q1 = -2.0 * b2 * ca * v
    q0 = b2 * v * v - a2 * base
    resultant = (p2 * q0 - q2 * p0) ** 2 - (p2 * q1 - q2 * p1) * (p1 * q0 - q1 * p0)
    return resultant, p0, q0


def _real_roots(poly: Polynomial) -> list[float]:
    scale = float(np.max(np.abs(poly.coef))) or 1.0
    trimmed = poly.trim(tol=1e-14 * scale)
    if trimmed.degree() < 1:
        return []
    deriv = trimmed.deriv()
    roots = []
    for root in trimmed.roots():
        if abs(root.imag) > ROOT_IMAG_TOL * max(1.0, abs(root.real)):
            continue
        value = float(root.real)
        slope = float(deriv(value))
        if slope != 0.0:
            step = float(trimmed(value)) / slope
            if abs(step) <= 1e-3 * (1.0 + abs(value)):
                value -= step
        roots.append(value)
    return roots


def p3p_solve(world: np.ndarray, bearings: np.ndarray) -> list[Pose]:
    """All real camera-from-world poses explaining three world points seen along unit bearings."""
    world = np.asarray(world, dtype=np.float64).reshape(3, 3)
    bearings = np.asarray(bearings, dtype=np.float64).reshape(3, 3)
    if np.any(np.abs(np.linalg.norm(bearings, axis=1) - 1.0) > 1e-9):
        raise ValueError("P3P bearings must be unit vectors.")
    d12 = np.linalg.norm(world[1] - world[0])
    d13 = np.linalg.norm(world[2] - world[0])
    d23 = np.linalg.norm(world[2] - world[1])
    extent = max(d12, d13, d23)
    area = np.linalg.norm(np.cross(world[1] - world[0], world[2] - world[0]))
    if extent <= 0 or area <= 1e-9 * extent * extent:
        raise DegenerateConfigurationError("P3P world points are collinear.")

    # Distances normalized by |P1 P3| so tolerances are scale-free.
    a2, b2, c2 = (d23 / d13) ** 2, 1.0, (d12 / d13) ** 2
    ca = float(bearings[1] @ bearings[2])
    cb = float(bearings[0] @ bearings[2])
    cg = float(bearings[0] @ bearings[1])
    quartic, p0, q0 = _depth_ratio_quartic(a2, b2, c2, ca, cb, cg)

    poses: list[Pose] = []
    for v in _real_roots(quartic):
        if v <= 0:
            continue
        base = 1.0 + v * v - 2.0 * cb * v
        if base <= 0:
            continue
        s1 = np.sqrt(b2 / base)
        disc = cg * cg - float(p0(v)) / b2
        if disc < -CONSTRAINT_TOL:
            continue
        root = np.sqrt(max(disc, 0.0))
        for u in {cg + root, cg - root}:
            if u <= 0:
                continue
            residual = b2 * u * u - 2.0 * b2 * ca * v * u + float(q0(v))
            if abs(residual) > CONSTRAINT_TOL * (1.0 + v * v + u * u):
                continue
            depths = d13 * s1 * np.array([1.0, u, v])
            try:
                pose = absolute_orientation(world, bearings * depths[:, None])
            except ValueError:
                continue
            if _bearing_residual(pose, world, bearings) > BEARING_TOL:
                continue
            if not any(_same_pose(pose, known) for known in poses):
                poses.append(pose)
    return poses[:4]


def _bearing_residual(pose: Pose, world: np.ndarray, bearings: np.ndarray) -> float:
    camera = pose.transform(world)
    norms = np.linalg.norm(camera, axis=1)
    if np.any(norms <= 0):
        return np.inf
    cosines = np.clip(np.sum(camera / norms[:, None] * bearings, axis=1), -1.0, 1.0)
    return float(np.max(np.arccos(cosines)))


def _same_pose(a: Pose, b: Pose, tol: float = 1e-9) -> bool:
    return bool(
        np.allclose(a.rotation, b.rotation, rtol=0.0, atol=tol)
        and np.allclose(a.translation, b.translation, rtol=0.0, atol=tol * (1.0 + np.linalg.norm(a.translation)))
    )


def reprojection_errors(pose: Pose, world: np.ndarray, pixels: np.ndarray, cam: PinholeStereo) -> np.ndarray:
    camera = pose.transform(world)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depth = camera[:, 2]
    ahead = depth > 1e-12
    safe = np.where(ahead, depth, 1.0)
    projected = np.stack(
        [cam.focal * camera[:, 0] / safe + cam.cx, cam.focal * camera[:, 1] / safe + cam.cy], axis=1
    )
    errors = np.linalg.norm(projected - pixels, axis=1)
    return np.where(ahead, errors, np.inf)


def ransac_p3p(
    world: np.ndarray, pixels: np.ndarray, cam: PinholeStereo, cfg: RansacConfig | None = None
) -> tuple[Pose, np.ndarray]:
    cfg = cfg or RansacConfig()
    world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(world)
    if n != len(pixels):
        raise ValueError(f"Correspondence count mismatch: {n} world points vs {len(pixels)} pixels.")
    if n < 4:
        raise InsufficientDataError(f"P3P RANSAC needs at least 4 correspondences, got {n}.")
    bearings = cam.bearings(pixels)

    rng = Rng(cfg.seed)
    best_pose: Pose | None = None
    best_inliers = np.zeros(n, dtype=bool)
    best_count = 0
    best_sse = np.inf
    for iteration in range(1, cfg.max_iterations + 1):
        sample = rng.choice(n, 4)
        try:
            candidates = p3p_solve(world[sample[:3]], bearings[sample[:3]])
        except DegenerateConfigurationError:
            continue
        if not candidates:
            continue
        check = sample[3:]
        pose = min(candidates, key=lambda c: float(reprojection_errors(c, world[check], pixels[check], cam)[0]))
        errors = reprojection_errors(pose, world, pixels, cam)
        inliers = errors <= cfg.threshold
        count = int(inliers.sum())
        sse = float(np.sum(errors[inliers] ** 2))
        if count > best_count or (count == best_count and count > 0 and sse < best_sse):
            best_pose, best_inliers, best_count, best_sse = pose, inliers, count, sse
        if (
            iteration >= cfg.min_iterations
            and best_count >= 4
            and should_stop(best_count / n, iteration, cfg.confidence, 4)
        ):
            break

    if best_pose is None or best_count < 4:
        raise EstimationError(f"P3P RANSAC found no pose with at least 4 inliers among {n} correspondences.")
    return best_pose, np.flatnonzero(best_inliers)


def rotation_error(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    """Geodesic angle of the relative rotation, radians."""
    cosine = (np.trace(np.asarray(r_est).T @ np.asarray(r_gt)) - 1.0) / 2.0
    return float(np.arccos(np.clip(cosine, -1.0, 1.0)))


def translation_error(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))
