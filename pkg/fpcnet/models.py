from __future__ import annotations

from dataclasses import dataclass, field
from hashlib import sha256
from typing import Any, Sequence

import numpy as np


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def _as_f32(value: float) -> float:
    return float(np.float32(value))


@dataclass(frozen=True, eq=False)
class Tensor:
    """Row-major float32 container used for every on-disk array."""

    values: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.values, dtype=np.float32)
        if array.ndim == 0:
            raise ValueError("Tensor rank must be at least 1.")
        if any(dim <= 0 for dim in array.shape):
            raise ValueError(f"Tensor shape entries must be positive, got {array.shape}.")
        object.__setattr__(self, "values", _readonly(array))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(dim) for dim in self.values.shape)

    @property
    def data(self) -> np.ndarray:
        return self.values.reshape(-1)

    def equals(self, other: "Tensor") -> bool:
        return self.shape == other.shape and self.values.tobytes() == other.values.tobytes()

    def digest(self) -> str:
        header = ",".join(str(dim) for dim in self.shape).encode("ascii")
        return sha256(header + b"|" + self.values.astype("<f4").tobytes()).hexdigest()

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=np.float32))


@dataclass(frozen=True, eq=False)
class ImageGray:
    pixels: np.ndarray
    # Header bytes of the PGM this image was read from; written back verbatim on save.
    pgm_header: bytes | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        array = np.asarray(self.pixels, dtype=np.float64)
        if array.ndim != 2 or array.size == 0:
            raise ValueError(f"ImageGray expects a non-empty 2-D array, got shape {array.shape}.")
        if not np.all(np.isfinite(array)) or array.min() < 0.0 or array.max() > 1.0:
            raise ValueError("ImageGray pixels must lie in [0, 1].")
        object.__setattr__(self, "pixels", _readonly(array))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def to_tensor(self) -> Tensor:
        return Tensor(self.pixels)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "ImageGray":
        return cls(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0))


@dataclass(frozen=True)
class Keypoint:
    """Subpixel location plus confidence; coordinates and score are stored at float32 precision."""

    x: float
    y: float
    score: float = 1.0

    def __post_init__(self) -> None:
        x, y, score = _as_f32(self.x), _as_f32(self.y), _as_f32(self.score)
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ValueError(f"Keypoint coordinates must be finite, got ({self.x}, {self.y}).")
        if not (0.0 <= score <= 1.0):
            raise ValueError(f"Keypoint score {self.score} outside [0, 1].")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "score", score)

    def as_dict(self) -> dict[str, Any]:
        return {"x": self.x, "y": self.y, "score": self.score}


def keypoints_to_array(kps: Sequence[Keypoint]) -> np.ndarray:
    if not kps:
        return np.zeros((0, 2), dtype=np.float64)
    return np.array([[kp.x, kp.y] for kp in kps], dtype=np.float64)


def keypoint_scores(kps: Sequence[Keypoint]) -> np.ndarray:
    return np.array([kp.score for kp in kps], dtype=np.float64)


@dataclass
class Rng:
    """Seeded Philox-4x64 stream. Single owner; split work with `child`."""

    seed: int
    spawn_key: tuple[int, ...] = ()
    _generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        sequence = np.random.SeedSequence(entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.Philox(sequence))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def child(self, index: int) -> "Rng":
        return Rng(self.seed, spawn_key=(*self.spawn_key, int(index)))

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Any = None) -> Any:
        return self._generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: Any = None) -> Any:
        return self._generator.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size: Any = None) -> Any:
        return self._generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def next_u64(self) -> int:
        return int(self._generator.integers(0, 2**63 - 1, dtype=np.int64))
