from __future__ import annotations

from dataclasses import dataclass
from hashlib import sha256
from typing import Any, Mapping, Sequence

import numpy as np

from .diffops import Tape, Var
from .heatmap import Heatmap
from .models import ImageGray, Rng


INPUT_MULTIPLE = 8
STAGES = 4
STAT_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class DetectorConfig:
    """Four stride-2 conv-BN-ReLU stages tapped into a top-down feature pyramid."""

    widths: tuple[int, ...] = (8, 12, 20, 48)
    fpn_width: int = 32
    input_height: int = 120
    input_width: int = 160

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != STAGES:
            raise ValueError(f"DetectorConfig needs exactly {STAGES} stage widths, got {len(self.widths)}.")
        if any(w <= 0 for w in self.widths) or self.fpn_width <= 0:
            raise ValueError("Detector widths must be positive.")
        if self.fpn_width > 4 * max(self.widths):
            raise ValueError(f"fpn_width {self.fpn_width} exceeds 4x the widest stage ({max(self.widths)}).")
        check_input_shape(self.input_height, self.input_width)

    def as_dict(self) -> dict[str, Any]:
        return {
            "widths": list(self.widths),
            "fpn_width": self.fpn_width,
            "input_height": self.input_height,
            "input_width": self.input_width,
        }


def check_input_shape(height: int, width: int) -> None:
    if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE or height <= 0 or width <= 0:
        raise ValueError(
            f"Detector input {height}x{width} must have both sides divisible by {INPUT_MULTIPLE}."
        )


def parameter_shapes(cfg: DetectorConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = 1
    for stage, width in enumerate(cfg.widths, start=1):
        shapes[f"stage{stage}.conv.weight"] = (width, in_ch, 3, 3)
        shapes[f"stage{stage}.conv.bias"] = (width,)
        for suffix in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"stage{stage}.bn.{suffix}"] = (width,)
        shapes[f"lateral{stage}.weight"] = (cfg.fpn_width, width)
        shapes[f"lateral{stage}.bias"] = (cfg.fpn_width,)
        in_ch = width
    shapes["head.conv.weight"] = (1, cfg.fpn_width)
    shapes["head.conv.bias"] = (1,)
    for suffix in ("gamma", "beta", "running_mean", "running_var"):
        shapes[f"head.bn.{suffix}"] = (1,)
    return dict(sorted(shapes.items()))


def is_running_stat(name: str) -> bool:
    return name.endswith(STAT_SUFFIXES)


@dataclass(frozen=True, eq=False)
class DetectorParams:
    config: DetectorConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = parameter_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"DetectorParams layer mismatch; missing={missing}, unexpected={extra}.")
        frozen: dict[str, np.ndarray] = {}
        for name in expected:
            array = np.array(self.tensors[name], dtype=np.float64)
            if array.shape != expected[name]:
                raise ValueError(f"Layer '{name}' has shape {array.shape}, expected {expected[name]}.")
            if not np.all(np.isfinite(array)):
                raise ValueError(f"Layer '{name}' contains non-finite values.")
            array.setflags(write=False)
            frozen[name] = array
        object.__setattr__(self, "tensors", frozen)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.tensors.items() if not is_running_stat(name)}

    def with_values(self, updates: Mapping[str, np.ndarray]) -> "DetectorParams":
        return DetectorParams(self.config, {**self.tensors, **updates})

    def rounded(self) -> "DetectorParams":
        """Same parameters at float32 precision, as stored in checkpoints."""
        return DetectorParams(
            self.config, {name: value.astype(np.float32).astype(np.float64) for name, value in self.tensors.items()}
        )

    def digest(self) -> str:
        hasher = sha256()
        for name, value in self.tensors.items():
            hasher.update(name.encode("utf-8"))
            hasher.update(value.astype("<f4").tobytes())
        return hasher.hexdigest()

    def equals(self, other: "DetectorParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(value, other.tensors[name]) for name, value in self.tensors.items()
        )


def build_detector(cfg: DetectorConfig, rng: Rng) -> DetectorParams:
    """He-normal conv kernels, zero biases, unit BN scale; one child stream per layer."""
    tensors: dict[str, np.ndarray] = {}
    for index, (name, shape) in enumerate(parameter_shapes(cfg).items()):
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.child(index).normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith((".gamma", ".running_var")):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return DetectorParams(cfg, tensors).rounded()


def network(
    tape: Tape,
    cfg: DetectorConfig,
    variables: Mapping[str, Var],
    stats: Mapping[str, np.ndarray],
    batch: np.ndarray,
    train: bool,
) -> Var:
    """Logits (N, 1, H, W) for a batch of (N, H, W) images; BN stat updates land on the tape."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3:
        raise ValueError(f"Detector batch must be (N, H, W), got shape {batch.shape}.")
    height, width = batch.shape[1:]
    check_input_shape(height, width)

    def bn(x: Var, prefix: str) -> Var:
        return tape.batch_norm(
            x,
            variables[f"{prefix}.gamma"],
            variables[f"{prefix}.beta"],
            stats[f"{prefix}.running_mean"],
            stats[f"{prefix}.running_var"],
            train,
            name=prefix,
        )

    x = tape.variable(batch[:, None, :, :])
    taps: list[Var] = []
    for stage in range(1, STAGES + 1):
        x = tape.conv2d(x, variables[f"stage{stage}.conv.weight"], variables[f"stage{stage}.conv.bias"], stride=2, pad=1)
        x = tape.relu(bn(x, f"stage{stage}.bn"))
        taps.append(x)

    laterals = [
        tape.conv1x1(tap, variables[f"lateral{stage}.weight"], variables[f"lateral{stage}.bias"])
        for stage, tap in enumerate(taps, start=1)
    ]
    fused = laterals[-1]
    for lateral in reversed(laterals[:-1]):
        up = tape.upsample_bicubic2x(fused)
        up = tape.crop(up, lateral.shape[2], lateral.shape[3])
        fused = tape.add(up, lateral)

    head = bn(tape.conv1x1(fused, variables["head.conv.weight"], variables["head.conv.bias"]), "head.bn")
    out = tape.upsample_bicubic2x(head)
    return tape.crop(out, height, width)


def parameter_variables(tape: Tape, params: DetectorParams) -> dict[str, Var]:
    return {name: tape.variable(value, name=name) for name, value in params.trainable().items()}


def running_stats(params: DetectorParams) -> dict[str, np.ndarray]:
    return {name: value for name, value in params.tensors.items() if is_running_stat(name)}


def detector_forward_batch(params: DetectorParams, images: Sequence[ImageGray]) -> list[Heatmap]:
    tape = Tape()
    batch = np.stack([img.pixels for img in images])
    logits = network(tape, params.config, parameter_variables(tape, params), running_stats(params), batch, train=False)
    return [Heatmap(logits.value[i, 0]) for i in range(len(images))]


def detector_forward(params: DetectorParams, img: ImageGray) -> Heatmap:
    """Eval-mode logits at input resolution."""
    return detector_forward_batch(params, [img])[0]
