from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence
import struct

import numpy as np

from .errors import FormatError
from .geometry import Homography
from .models import ImageGray, Keypoint, Tensor
from .pose import Pose


TENSOR_MAGIC = b"FPCT"
KEYPOINT_HEADER = "x,y,score"
MATCH_HEADER = "index_a,index_b,distance"
HISTOGRAM_HEADER = "bin_center,count"


def _f32_text(value: float) -> str:
    return np.format_float_positional(np.float32(value), unique=True, trim="-")


def save_tensor(tensor: Tensor, path: str | Path) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = TENSOR_MAGIC + struct.pack("<I", len(tensor.shape))
    header += struct.pack(f"<{len(tensor.shape)}I", *tensor.shape)
    out.write_bytes(header + tensor.values.astype("<f4").tobytes())


def decode_tensor(raw: bytes) -> Tensor:
    if len(raw) < 8 or raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"Bad tensor magic {raw[:4]!r}; expected {TENSOR_MAGIC!r}.")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank == 0:
        raise FormatError("Tensor rank 0 is not allowed.")
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise FormatError("Truncated tensor header.")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(dim == 0 for dim in dims):
        raise FormatError(f"Tensor dims must be positive, got {dims}.")
    count = int(np.prod(dims, dtype=np.int64))
    payload = raw[offset:]
    if len(payload) != 4 * count:
        raise FormatError(f"Tensor payload has {len(payload)} bytes, expected {4 * count} for shape {dims}.")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return Tensor(values)


def load_tensor(path: str | Path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


def _pgm_header_tokens(raw: bytes) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("Malformed PGM header.")
        tokens.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte.")
    return tokens, pos + 1


def decode_image_pgm(raw: bytes) -> ImageGray:
    if raw[:2] != b"P5":
        raise FormatError(f"Unsupported image format {raw[:2]!r}; only binary PGM (P5) is accepted.")
    (width, height, maxval), offset = _pgm_header_tokens(raw)
    if maxval != 255:
        raise FormatError(f"Unsupported PGM maxval {maxval}; expected 255.")
    if width <= 0 or height <= 0:
        raise FormatError(f"Invalid PGM dimensions {width}x{height}.")
    payload = raw[offset:]
    if len(payload) != width * height:
        raise FormatError(f"PGM payload has {len(payload)} bytes, expected {width * height}.")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0
    return ImageGray(pixels, pgm_header=bytes(raw[:offset]))


def load_image_pgm(path: str | Path) -> ImageGray:
    return decode_image_pgm(Path(path).read_bytes())


def encode_image_pgm(image: ImageGray) -> bytes:
    quantized = np.rint(image.pixels * 255.0).astype(np.uint8)
    header = image.pgm_header or f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + quantized.tobytes()


def save_image_pgm(image: ImageGray, path: str | Path) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_image_pgm(image))


def keypoints_csv(kps: Sequence[Keypoint]) -> str:
    lines = [KEYPOINT_HEADER]
    for kp in kps:
        lines.append(f"{_f32_text(kp.x)},{_f32_text(kp.y)},{_f32_text(kp.score)}")
    return "\n".join(lines) + "\n"


def _parse_float(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise FormatError(f"Non-numeric field '{token}' on line {line_no}.") from None


def parse_keypoints_csv(text: str) -> list[Keypoint]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != KEYPOINT_HEADER:
        raise FormatError(f"Keypoint CSV must start with header '{KEYPOINT_HEADER}'.")
    kps: list[Keypoint] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 3:
            raise FormatError(f"Expected 3 fields on line {line_no}, got {len(fields)}.")
        x, y, score = (_parse_float(token, line_no) for token in fields)
        if not (0.0 <= score <= 1.0):
            raise FormatError(f"Score {score} on line {line_no} outside [0, 1].")
        kps.append(Keypoint(x, y, score))
    return kps


def save_keypoints(kps: Sequence[Keypoint], path: str | Path) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(keypoints_csv(kps), encoding="utf-8")


def load_keypoints(path: str | Path) -> list[Keypoint]:
    return parse_keypoints_csv(Path(path).read_text(encoding="utf-8"))


def homography_text(h: Homography) -> str:
    rows = [" ".join(repr(float(v)) for v in row) for row in h.m]
    return "\n".join(rows) + "\n"


def parse_homography_text(text: str) -> Homography:
    tokens = text.split()
    if len(tokens) != 9:
        raise FormatError(f"Homography file must contain 9 numbers, got {len(tokens)}.")
    values = [_parse_float(token, 1) for token in tokens]
    return Homography(np.array(values, dtype=np.float64).reshape(3, 3))


def save_homography(h: Homography, path: str | Path) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(homography_text(h), encoding="utf-8")


def load_homography(path: str | Path) -> Homography:
    return parse_homography_text(Path(path).read_text(encoding="utf-8"))


def poses_text(poses: Iterable[Pose]) -> str:
    lines = []
    for pose in poses:
        values = [*pose.rotation.reshape(-1), *pose.translation]
        lines.append(" ".join(repr(float(v)) for v in values))
    return "\n".join(lines) + "\n"


def parse_poses_text(text: str) -> list[Pose]:
    poses: list[Pose] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise FormatError(f"Pose line {line_no} must contain 12 numbers, got {len(tokens)}.")
        values = np.array([_parse_float(token, line_no) for token in tokens])
        poses.append(Pose(values[:9].reshape(3, 3), values[9:]))
    return poses


def matches_csv(matches: Sequence["object"]) -> str:
    lines = [MATCH_HEADER]
    for match in matches:
        lines.append(f"{match.index_a},{match.index_b},{repr(float(match.distance))}")
    return "\n".join(lines) + "\n"


def parse_matches_csv(text: str) -> list[tuple[int, int, float]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MATCH_HEADER:
        raise FormatError(f"Match CSV must start with header '{MATCH_HEADER}'.")
    rows: list[tuple[int, int, float]] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 3:
            raise FormatError(f"Expected 3 fields on line {line_no}, got {len(fields)}.")
        try:
            rows.append((int(fields[0]), int(fields[1]), float(fields[2])))
        except ValueError:
            raise FormatError(f"Malformed match row on line {line_no}.") from None
    return rows


def histogram_csv(histogram: Sequence[tuple[float, int]]) -> str:
    lines = [HISTOGRAM_HEADER]
    for center, count in histogram:
        lines.append(f"{repr(float(center))},{int(count)}")
    return "\n".join(lines) + "\n"
