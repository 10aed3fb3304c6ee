from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Literal

import numpy as np
from scipy import sparse

from .errors import DegenerateConfigurationError, PointAtInfinityError, SingularHomographyError
from .models import ImageGray, Rng, _readonly


DET_EPS = 1e-12
DENOM_EPS = 1e-12
MAX_SAMPLE_ATTEMPTS = 100
INTERPOLATIONS = ("bilinear", "bicubic")
Interp = Literal["bilinear", "bicubic"]


@dataclass(frozen=True, eq=False)
class Homography:
    """Projective 3x3 map, normalized to m[2][2] == 1 when that entry is not near zero."""

    m: np.ndarray

    def __post_init__(self) -> None:
        array = np.array(self.m, dtype=np.float64)
        if array.shape != (3, 3):
            raise ValueError(f"Homography expects a 3x3 matrix, got shape {array.shape}.")
        if not np.all(np.isfinite(array)):
            raise SingularHomographyError("Homography entries must be finite.")
        if abs(array[2, 2]) > DET_EPS:
            array = array / array[2, 2]
        det = float(np.linalg.det(array))
        if abs(det) <= DET_EPS:
            raise SingularHomographyError(f"Homography determinant {det:.3e} is too close to zero.")
        object.__setattr__(self, "m", _readonly(array))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def as_list(self) -> list[list[float]]:
        return [[float(v) for v in row] for row in self.m]

    def allclose(self, other: "Homography", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.m, other.m, rtol=0.0, atol=atol))


@dataclass(frozen=True, eq=False)
class ValidityMask:
    bits: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.bits, dtype=bool)
        if array.ndim != 2:
            raise ValueError(f"ValidityMask expects a 2-D grid, got shape {array.shape}.")
        object.__setattr__(self, "bits", _readonly(array))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def intersect(self, other: "ValidityMask") -> "ValidityMask":
        if self.bits.shape != other.bits.shape:
            raise ValueError(f"Mask shapes differ: {self.bits.shape} vs {other.bits.shape}.")
        return ValidityMask(self.bits & other.bits)

    @classmethod
    def full(cls, height: int, width: int) -> "ValidityMask":
        return cls(np.ones((height, width), dtype=bool))


@dataclass(frozen=True)
class HomographySamplerConfig:
    perturbation: float = 0.15
    rotation: float = 0.26
    scale_range: tuple[float, float] = (0.8, 1.25)
    translation: float = 0.1

    def __post_init__(self) -> None:
        if not (0.0 <= self.perturbation < 0.5):
            raise ValueError(f"perturbation must lie in [0, 0.5), got {self.perturbation}.")
        low, high = self.scale_range
        if low <= 0.0 or high < low:
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}.")
        if self.rotation < 0.0 or self.translation < 0.0:
            raise ValueError("rotation and translation ranges must be non-negative.")

    @property
    def is_identity(self) -> bool:
        return (
            self.perturbation == 0.0
            and self.rotation == 0.0
            and self.translation == 0.0
            and tuple(self.scale_range) == (1.0, 1.0)
        )

    @classmethod
    def zero(cls) -> "HomographySamplerConfig":
        return cls(perturbation=0.0, rotation=0.0, scale_range=(1.0, 1.0), translation=0.0)

    def as_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["scale_range"] = list(self.scale_range)
        return payload


def _homogeneous_map(m: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = pts[:, 0]
    y = pts[:, 1]
    den = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    safe = np.where(np.abs(den) > DENOM_EPS, den, 1.0)
    out = np.stack(
        [
            (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / safe,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / safe,
        ],
        axis=1,
    )
    return out, np.abs(den) > DENOM_EPS


def hom_apply(h: Homography, pt: tuple[float, float]) -> tuple[float, float]:
    x, y = float(pt[0]), float(pt[1])
    m = h.m
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= DENOM_EPS:
        raise PointAtInfinityError(f"Point ({x}, {y}) maps to infinity (denominator {w:.3e}).")
    return (
        float((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w),
        float((m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w),
    )


def warp_points(h: Homography, pts: np.ndarray) -> np.ndarray:
    array = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    out, finite = _homogeneous_map(h.m, array)
    if not np.all(finite):
        bad = array[~finite][0]
        raise PointAtInfinityError(f"Point ({bad[0]}, {bad[1]}) maps to infinity.")
    return out


def hom_invert(h: Homography) -> Homography:
    try:
        inverse = np.linalg.inv(h.m)
    except np.linalg.LinAlgError as exc:
        raise SingularHomographyError(f"Homography is not invertible: {exc}.") from None
    return Homography(inverse)


def hom_compose(a: Homography, b: Homography) -> Homography:
    """Map applying `b` first, then `a`."""
    return Homography(a.m @ b.m)


def _four_point_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y])
        rhs.append(v)
    solution = np.linalg.solve(np.array(rows), np.array(rhs))
    return np.append(solution, 1.0).reshape(3, 3)


def _is_convex_like(src: np.ndarray, dst: np.ndarray) -> bool:
    def turns(quad: np.ndarray) -> np.ndarray:
        edges = np.roll(quad, -1, axis=0) - quad
        nxt = np.roll(edges, -1, axis=0)
        return edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]

    reference = np.sign(turns(src))
    current = turns(dst)
    return bool(np.all(np.sign(current) == reference) and np.all(np.abs(current) > 1e-6))


def image_corners(width: int, height: int) -> np.ndarray:
    return np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0], [width - 1.0, height - 1.0]]
    )


def sample_homography(cfg: HomographySamplerConfig, width: int, height: int, rng: Rng) -> Homography:
    if width < 8 or height < 8:
        raise ValueError(f"sample_homography needs an image of at least 8x8, got {width}x{height}.")
    if cfg.is_identity:
        return Homography.identity()
    # Corners in boundary order so the convexity test sees a simple polygon.
    src = np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]]
    )
    center = np.array([(width - 1.0) / 2.0, (height - 1.0) / 2.0])
    side = np.array([float(width), float(height)])
    log_low, log_high = np.log(cfg.scale_range[0]), np.log(cfg.scale_range[1])
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        scale = float(np.exp(rng.uniform(log_low, log_high)))
        angle = float(rng.uniform(-cfg.rotation, cfg.rotation))
        shift = rng.uniform(-cfg.translation, cfg.translation, size=2) * side
        jitter = rng.uniform(-cfg.perturbation, cfg.perturbation, size=(4, 2)) * side
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        dst = center + scale * (src - center) @ rot.T + shift + jitter
        if np.any(np.abs(dst - src) >= 0.5 * side):
            continue
        if not _is_convex_like(src, dst):
            continue
        try:
            return Homography(_four_point_homography(src, dst))
        except (np.linalg.LinAlgError, SingularHomographyError):
            continue
    raise DegenerateConfigurationError(
        f"sample_homography found no valid corner configuration in {MAX_SAMPLE_ATTEMPTS} attempts."
    )


def _bilinear_taps(coords: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    valid = (coords >= 0.0) & (coords <= size - 1.0)
    clipped = np.clip(np.where(np.isfinite(coords), coords, 0.0), 0.0, size - 1.0)
    base = np.minimum(np.floor(clipped), max(size - 2, 0)).astype(np.int64)
    frac = clipped - base
    index = np.stack([base, np.minimum(base + 1, size - 1)], axis=1)
    weight = np.stack([1.0 - frac, frac], axis=1)
    return index, weight, valid


def keys_weights(frac: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic weights for the taps at offsets -1, 0, 1, 2 from floor(s)."""
    dist = np.stack([1.0 + frac, frac, 1.0 - frac, 2.0 - frac], axis=-1)
    near = (a + 2.0) * dist**3 - (a + 3.0) * dist**2 + 1.0
    far = a * dist**3 - 5.0 * a * dist**2 + 8.0 * a * dist - 4.0 * a
    return np.where(dist <= 1.0, near, np.where(dist < 2.0, far, 0.0))


def _bicubic_taps(coords: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    finite = np.isfinite(coords)
    safe = np.where(finite, coords, -10.0)
    base = np.floor(safe).astype(np.int64)
    frac = safe - base
    on_grid = (frac == 0.0) & (base >= 0) & (base <= size - 1)
    inside = (base >= 1) & (base <= size - 3)
    valid = finite & (on_grid | inside)
    index = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, size - 1)
    weight = keys_weights(frac)
    exact = np.zeros_like(weight)
    exact[:, 1] = 1.0
    weight = np.where(on_grid[:, None], exact, weight)
    return index, weight, valid


def warp_operator(
    h: Homography,
    height: int,
    width: int,
    interp: Interp = "bilinear",
    src_shape: tuple[int, int] | None = None,
) -> tuple[sparse.csr_matrix, ValidityMask]:
    """Sparse (H*W, Hs*Ws) operator that inverse-maps output pixels into the source grid."""
    if interp not in INTERPOLATIONS:
        raise ValueError(f"Unknown interpolation '{interp}'. Expected one of: {', '.join(INTERPOLATIONS)}.")
    src_h, src_w = src_shape if src_shape is not None else (height, width)
    inverse = hom_invert(h)
    ys, xs = np.mgrid[0:height, 0:width]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    source, finite = _homogeneous_map(inverse.m, grid)
    sx = np.where(finite, source[:, 0], np.nan)
    sy = np.where(finite, source[:, 1], np.nan)

    taps = _bilinear_taps if interp == "bilinear" else _bicubic_taps
    ix, wx, vx = taps(sx, src_w)
    iy, wy, vy = taps(sy, src_h)
    valid = finite & vx & vy

    cols = (iy[:, :, None] * src_w + ix[:, None, :]).reshape(len(grid), -1)
    vals = (wy[:, :, None] * wx[:, None, :]).reshape(len(grid), -1)
    vals = np.where(valid[:, None], vals, 0.0)
    rows = np.repeat(np.arange(len(grid)), cols.shape[1])
    operator = sparse.csr_matrix(
        (vals.ravel(), (rows, cols.ravel())), shape=(height * width, src_h * src_w)
    )
    operator.eliminate_zeros()
    return operator, ValidityMask(valid.reshape(height, width))


def warp_array(values: np.ndarray, h: Homography, interp: Interp = "bilinear") -> tuple[np.ndarray, ValidityMask]:
    height, width = values.shape
    operator, valid = warp_operator(h, height, width, interp)
    return (operator @ np.asarray(values, dtype=np.float64).ravel()).reshape(height, width), valid


def warp_image(img: ImageGray, h: Homography, interp: Interp = "bilinear") -> tuple[ImageGray, ValidityMask]:
    warped, valid = warp_array(img.pixels, h, interp)
    return ImageGray(np.clip(warped, 0.0, 1.0)), valid


def warp_keypoint_mask(mask: np.ndarray, h: Homography) -> np.ndarray:
    """Move the positive pixels of a binary mask through `h`, snapping to the nearest pixel."""
    height, width = mask.shape
    ys, xs = np.nonzero(np.asarray(mask) > 0.5)
    out = np.zeros((height, width), dtype=np.float64)
    if len(xs) == 0:
        return out
    moved, finite = _homogeneous_map(h.m, np.stack([xs, ys], axis=1).astype(np.float64))
    cols = np.rint(moved[:, 0])
    rows = np.rint(moved[:, 1])
    keep = finite & (cols >= 0) & (cols <= width - 1) & (rows >= 0) & (rows <= height - 1)
    out[rows[keep].astype(np.int64), cols[keep].astype(np.int64)] = 1.0
    return out


def corner_error(h_gt: Homography, h_est: Homography, width: int, height: int) -> float:
    corners = image_corners(width, height)
    gt = warp_points(h_gt, corners)
    est = warp_points(h_est, corners)
    return float(np.mean(np.linalg.norm(gt - est, axis=1)))
