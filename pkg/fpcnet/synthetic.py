from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .formats import load_homography, load_image_pgm, save_homography, save_image_pgm
from .geometry import (
    Homography,
    HomographySamplerConfig,
    _homogeneous_map,
    sample_homography,
    warp_image,
)
from .models import ImageGray, Rng
from .pose import PinholeStereo, Pose


SHAPE_KINDS = ("triangle", "quad", "square", "checkerboard")
SUPERSAMPLE = 4
MARGIN = 4.0
MIN_SCENE_SIDE = 16
MAX_SHAPE_ATTEMPTS = 100


@dataclass(frozen=True)
class Shape:
    kind: str
    polygons: tuple[np.ndarray, ...]
    shades: tuple[float, ...]
    vertices: np.ndarray


@dataclass(frozen=True)
class PhotometricConfig:
    gain_range: tuple[float, float] = (0.7, 1.3)
    bias_range: tuple[float, float] = (-0.1, 0.1)
    noise_max: float = 0.02
    blur_sigma_max: float = 0.0

    def __post_init__(self) -> None:
        if self.gain_range[0] <= 0 or self.gain_range[1] < self.gain_range[0]:
            raise ValueError(f"gain_range must be positive and ordered, got {self.gain_range}.")
        if self.bias_range[1] < self.bias_range[0]:
            raise ValueError(f"bias_range must be ordered, got {self.bias_range}.")
        if self.noise_max < 0 or self.blur_sigma_max < 0:
            raise ValueError("noise_max and blur_sigma_max must be non-negative.")

    @classmethod
    def identity(cls) -> "PhotometricConfig":
        return cls(gain_range=(1.0, 1.0), bias_range=(0.0, 0.0), noise_max=0.0, blur_sigma_max=0.0)

    def as_dict(self) -> dict[str, Any]:
        return {
            "gain_range": list(self.gain_range),
            "bias_range": list(self.bias_range),
            "noise_max": self.noise_max,
            "blur_sigma_max": self.blur_sigma_max,
        }


@dataclass(frozen=True, eq=False)
class PairSample:
    """Two views plus exactly one ground truth: a planar homography a->b or a relative pose."""

    pair_id: str
    image_a: ImageGray
    image_b: ImageGray
    h_gt: Homography | None = None
    pose_gt: Pose | None = None
    split: str = ""
    corners_a: np.ndarray | None = None
    corners_b: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.h_gt is None) == (self.pose_gt is None):
            raise ValueError(f"Pair '{self.pair_id}' must carry exactly one ground truth (homography or pose).")

    @property
    def size(self) -> tuple[int, int]:
        return (self.image_a.width, self.image_a.height)


@dataclass(frozen=True, eq=False)
class StereoScene:
    """3-D points seen by a rectified stereo rig at time 1 and by its left camera at time 2."""

    scene_id: str
    cam: PinholeStereo
    points: np.ndarray
    left1: np.ndarray
    right1: np.ndarray
    left2: np.ndarray
    pose_gt: Pose
    inlier: np.ndarray = field(repr=False)


def _background(rng: Rng, width: int, height: int) -> np.ndarray:
    base = rng.uniform(0.05, 0.3)
    gx, gy = rng.uniform(-0.1, 0.1, size=2)
    ys, xs = np.mgrid[0:height, 0:width]
    return np.clip(base + gx * xs / width + gy * ys / height, 0.0, 1.0)


def _shade(rng: Rng) -> float:
    return float(rng.uniform(0.6, 1.0))


def _inner(width: int, height: int) -> tuple[float, float]:
    return width - 1 - 2 * MARGIN, height - 1 - 2 * MARGIN


def _triangle(rng: Rng, width: int, height: int) -> Shape:
    inner_w, inner_h = _inner(width, height)
    min_edge = min(8.0, 0.25 * min(inner_w, inner_h))
    for _ in range(MAX_SHAPE_ATTEMPTS):
        pts = np.column_stack(
            [rng.uniform(MARGIN, width - 1 - MARGIN, 3), rng.uniform(MARGIN, height - 1 - MARGIN, 3)]
        )
        u, v = pts[1] - pts[0], pts[2] - pts[0]
        area = abs(u[0] * v[1] - u[1] * v[0]) / 2.0
        edges = np.linalg.norm(pts - np.roll(pts, 1, axis=0), axis=1)
        if area > 0.02 * width * height and edges.min() > min_edge:
            return Shape("triangle", (pts,), (_shade(rng),), pts)
    # Half of the drawable box always clears both limits.
    pts = np.array([[MARGIN, MARGIN], [width - 1 - MARGIN, MARGIN], [MARGIN, height - 1 - MARGIN]])
    return Shape("triangle", (pts,), (_shade(rng),), pts)


def _quad(rng: Rng, width: int, height: int) -> Shape:
    size = min(rng.uniform(0.15, 0.3) * min(width, height), 0.5 * min(_inner(width, height)))
    center = np.array(
        [rng.uniform(MARGIN + size, width - 1 - MARGIN - size), rng.uniform(MARGIN + size, height - 1 - MARGIN - size)]
    )
    angles = rng.uniform(0.0, 2.0 * np.pi) + np.pi / 2.0 * np.arange(4) + rng.uniform(-0.25, 0.25, 4)
    radii = size * rng.uniform(0.85, 1.0, 4)
    pts = center + np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    return Shape("quad", (pts,), (_shade(rng),), pts)


def _square(rng: Rng, width: int, height: int) -> Shape:
    side = min(rng.uniform(0.2, 0.45) * min(width, height), min(_inner(width, height)))
    x0 = rng.uniform(MARGIN, width - 1 - MARGIN - side)
    y0 = rng.uniform(MARGIN, height - 1 - MARGIN - side)
    pts = np.array([[x0, y0], [x0 + side, y0], [x0 + side, y0 + side], [x0, y0 + side]])
    return Shape("square", (pts,), (_shade(rng),), pts)


def _checkerboard(rng: Rng, width: int, height: int) -> Shape:
    inner_w, inner_h = _inner(width, height)
    cols, rows = int(rng.integers(2, 5)), int(rng.integers(2, 4))
    cell_max = min(inner_w / cols, inner_h / rows)
    cell_lo = min(6.0, cell_max)
    cell_hi = max(cell_lo, min(max(6.5, min(inner_w / (cols + 1), inner_h / (rows + 1))), cell_max))
    cell = rng.uniform(cell_lo, cell_hi)
    x0 = rng.uniform(MARGIN, width - 1 - MARGIN - cols * cell)
    y0 = rng.uniform(MARGIN, height - 1 - MARGIN - rows * cell)
    light, dark = _shade(rng), float(rng.uniform(0.0, 0.1))
    polygons, shades = [], []
    for r in range(rows):
        for c in range(cols):
            x, y = x0 + c * cell, y0 + r * cell
            polygons.append(np.array([[x, y], [x + cell, y], [x + cell, y + cell], [x, y + cell]]))
            shades.append(light if (r + c) % 2 == 0 else dark)
    gx, gy = np.meshgrid(x0 + cell * np.arange(cols + 1), y0 + cell * np.arange(rows + 1))
    vertices = np.column_stack([gx.ravel(), gy.ravel()])
    return Shape("checkerboard", tuple(polygons), tuple(shades), vertices)


_BUILDERS = {"triangle": _triangle, "quad": _quad, "square": _square, "checkerboard": _checkerboard}


def synth_shapes(rng: Rng, width: int, height: int, n_shapes: int, kinds: Sequence[str] = SHAPE_KINDS) -> list[Shape]:
    if n_shapes < 1:
        raise ValueError(f"n_shapes must be at least 1, got {n_shapes}.")
    if min(width, height) < MIN_SCENE_SIDE:
        raise ValueError(f"Scenes need at least {MIN_SCENE_SIDE} pixels per side, got {width}x{height}.")
    unknown = [kind for kind in kinds if kind not in _BUILDERS]
    if unknown or not kinds:
        raise ValueError(f"Unknown shape kinds {unknown}. Expected any of: {', '.join(SHAPE_KINDS)}.")
    shapes = []
    for index in range(n_shapes):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        shapes.append(_BUILDERS[kind](rng.child(index), width, height))
    return shapes


def _coverage(polygon: np.ndarray, width: int, height: int) -> tuple[tuple[slice, slice], np.ndarray]:
    """Supersampled fraction of each pixel inside a convex polygon, over its bounding box."""
    x_lo = max(int(np.floor(polygon[:, 0].min())) - 1, 0)
    x_hi = min(int(np.ceil(polygon[:, 0].max())) + 2, width)
    y_lo = max(int(np.floor(polygon[:, 1].min())) - 1, 0)
    y_hi = min(int(np.ceil(polygon[:, 1].max())) + 2, height)
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    sx = (np.arange(x_lo, x_hi)[:, None] + offsets[None, :]).ravel()
    sy = (np.arange(y_lo, y_hi)[:, None] + offsets[None, :]).ravel()
    px, py = np.meshgrid(sx, sy)
    edges = np.roll(polygon, -1, axis=0) - polygon
    cross = edges[:, 0][:, None, None] * (py - polygon[:, 1][:, None, None]) - edges[:, 1][:, None, None] * (
        px - polygon[:, 0][:, None, None]
    )
    inside = np.all(cross >= 0, axis=0) | np.all(cross <= 0, axis=0)
    fine = inside.reshape(y_hi - y_lo, SUPERSAMPLE, x_hi - x_lo, SUPERSAMPLE)
    return (slice(y_lo, y_hi), slice(x_lo, x_hi)), fine.mean(axis=(1, 3))


def render_shapes(shapes: Sequence[Shape], background: np.ndarray) -> ImageGray:
    canvas = np.array(background, dtype=np.float64)
    height, width = canvas.shape
    for shape in shapes:
        for polygon, shade in zip(shape.polygons, shape.shades):
            window, alpha = _coverage(polygon, width, height)
            canvas[window] = (1.0 - alpha) * canvas[window] + alpha * shade
    return ImageGray.from_array(canvas)


def synth_scene(
    rng: Rng, width: int, height: int, n_shapes: int, kinds: Sequence[str] = SHAPE_KINDS
) -> tuple[ImageGray, np.ndarray]:
    """Anti-aliased shapes on a shaded background plus every drawn vertex as (K, 2) x/y."""
    background = _background(rng.child(0), width, height)
    shapes = synth_shapes(rng.child(1), width, height, n_shapes, kinds)
    corners = np.concatenate([shape.vertices for shape in shapes], axis=0)
    return render_shapes(shapes, background), corners


def apply_photometric(img: ImageGray, cfg: PhotometricConfig, rng: Rng) -> ImageGray:
    gain = rng.uniform(*cfg.gain_range)
    bias = rng.uniform(*cfg.bias_range)
    noise_sigma = rng.uniform(0.0, cfg.noise_max)
    blur_sigma = rng.uniform(0.0, cfg.blur_sigma_max)
    noise = rng.normal(0.0, 1.0, size=img.pixels.shape)
    pixels = img.pixels
    if blur_sigma > 0:
        pixels = ndimage.gaussian_filter(pixels, blur_sigma, mode="reflect")
    return ImageGray.from_array(pixels * gain + bias + noise * noise_sigma)


def _visible(points: np.ndarray, h: Homography, width: int, height: int) -> np.ndarray:
    moved, finite = _homogeneous_map(h.m, points)
    keep = finite & (moved[:, 0] >= 0) & (moved[:, 0] <= width - 1) & (moved[:, 1] >= 0) & (moved[:, 1] <= height - 1)
    return moved[keep]


def make_pair(
    img: ImageGray,
    sampler: HomographySamplerConfig,
    photometric: PhotometricConfig,
    rng: Rng,
    pair_id: str = "pair",
    corners: np.ndarray | None = None,
    split: str = "",
) -> PairSample:
    h = sample_homography(sampler, img.width, img.height, rng.child(0))
    warped, _ = warp_image(img, h, "bilinear")
    image_b = apply_photometric(warped, photometric, rng.child(1))
    corners_b = _visible(np.asarray(corners, dtype=np.float64), h, img.width, img.height) if corners is not None else None
    return PairSample(pair_id, img, image_b, h_gt=h, split=split, corners_a=corners, corners_b=corners_b)


def synthetic_pairs(
    count: int,
    seed: int,
    width: int = 160,
    height: int = 120,
    n_shapes: int = 6,
    sampler: HomographySamplerConfig | None = None,
    photometric: PhotometricConfig | None = None,
) -> list[PairSample]:
    sampler = sampler or HomographySamplerConfig()
    photometric = photometric or PhotometricConfig()
    root = Rng(seed)
    pairs = []
    for index in range(count):
        stream = root.child(index)
        img, corners = synth_scene(stream.child(0), width, height, n_shapes)
        pairs.append(make_pair(img, sampler, photometric, stream.child(1), f"syn{index:04d}", corners))
    return pairs


def synthetic_images(count: int, seed: int, width: int = 160, height: int = 120, n_shapes: int = 6) -> list[ImageGray]:
    root = Rng(seed)
    return [synth_scene(root.child(index), width, height, n_shapes)[0] for index in range(count)]


def save_pair_dir(pairs: Sequence[PairSample], directory: str | Path) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        if pair.h_gt is None:
            raise ValueError(f"Pair '{pair.pair_id}' has no homography; only planar pairs can be saved.")
        save_image_pgm(pair.image_a, out / f"{pair.pair_id}_a.pgm")
        save_image_pgm(pair.image_b, out / f"{pair.pair_id}_b.pgm")
        save_homography(pair.h_gt, out / f"{pair.pair_id}.hom")
        if pair.split:
            (out / f"{pair.pair_id}.tag").write_text(pair.split + "\n", encoding="utf-8")


def load_pair_dir(directory: str | Path) -> list[PairSample]:
    """Planar pairs from `<id>_a.pgm`, `<id>_b.pgm`, `<id>.hom` and an optional `<id>.tag`."""
    root = Path(directory)
    if not root.is_dir():
        raise FormatError(f"Pair directory '{root}' does not exist.")
    pairs = []
    for hom_path in sorted(root.glob("*.hom")):
        pair_id = hom_path.stem
        a_path, b_path = root / f"{pair_id}_a.pgm", root / f"{pair_id}_b.pgm"
        if not a_path.is_file() or not b_path.is_file():
            raise FormatError(f"Pair '{pair_id}' is missing '{a_path.name}' or '{b_path.name}'.")
        tag_path = root / f"{pair_id}.tag"
        split = tag_path.read_text(encoding="utf-8").strip() if tag_path.is_file() else ""
        pairs.append(
            PairSample(pair_id, load_image_pgm(a_path), load_image_pgm(b_path), h_gt=load_homography(hom_path), split=split)
        )
    if not pairs:
        raise FormatError(f"No '*.hom' pairs found in '{root}'.")
    return pairs


def _random_rotation(rng: Rng, max_angle: float) -> np.ndarray:
    axis = rng.normal(0.0, 1.0, size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    skew = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * skew + (1.0 - np.cos(angle)) * skew @ skew


def default_stereo_camera() -> PinholeStereo:
    return PinholeStereo(focal=200.0, cx=80.0, cy=60.0, baseline=0.5)


def synth_stereo_scene(
    rng: Rng,
    cam: PinholeStereo,
    n_points: int,
    noise_px: float = 0.0,
    outlier_fraction: float = 0.0,
    scene_id: str = "scene",
) -> StereoScene:
    if n_points < 1:
        raise ValueError(f"n_points must be at least 1, got {n_points}.")
    if not (0.0 <= outlier_fraction < 1.0):
        raise ValueError(f"outlier_fraction must lie in [0, 1), got {outlier_fraction}.")
    rotation = _random_rotation(rng.child(0), 0.2)
    pose = Pose(rotation, rng.child(1).uniform(-0.5, 0.5, size=3))

    points_rng = rng.child(2)
    points = np.zeros((0, 3))
    while len(points) < n_points:
        batch = np.column_stack(
            [
                points_rng.uniform(-2.0, 2.0, n_points),
                points_rng.uniform(-1.5, 1.5, n_points),
                points_rng.uniform(4.0, 12.0, n_points),
            ]
        )
        ahead = pose.transform(batch)[:, 2] > 1.0
        points = np.vstack([points, batch[ahead]])
    points = points[:n_points]

    left1 = cam.project_left(points)
    right1 = cam.project_left(points - np.array([cam.baseline, 0.0, 0.0]))
    left2 = cam.project_left(pose.transform(points))
    if noise_px > 0:
        noise = rng.child(3)
        left1 = left1 + noise.normal(0.0, noise_px, size=(n_points, 2))
        right1 = right1 + noise.normal(0.0, noise_px, size=(n_points, 2))
        left2 = left2 + noise.normal(0.0, noise_px, size=(n_points, 2))

    inlier = np.ones(n_points, dtype=bool)
    n_out = int(round(outlier_fraction * n_points))
    if n_out:
        chosen = rng.child(4).choice(n_points, n_out)
        inlier[chosen] = False
        left2[chosen] = rng.child(5).uniform(0.0, 1.0, size=(n_out, 2)) * np.array([2 * cam.cx, 2 * cam.cy])
    return StereoScene(scene_id, cam, points, left1, right1, left2, pose, inlier)


def synthetic_stereo_scenes(
    count: int,
    seed: int,
    cam: PinholeStereo | None = None,
    n_points: int = 100,
    noise_px: float = 0.0,
    outlier_fraction: float = 0.0,
) -> list[StereoScene]:
    cam = cam or default_stereo_camera()
    root = Rng(seed)
    return [
        synth_stereo_scene(root.child(index), cam, n_points, noise_px, outlier_fraction, f"stereo{index:04d}")
        for index in range(count)
    ]
