from __future__ import annotations

from pathlib import Path

import numpy as np

from .detector import DetectorConfig, DetectorParams, parameter_shapes
from .errors import CheckpointError, FormatError
from .formats import load_tensor, save_tensor
from .models import Tensor


MANIFEST_NAME = "manifest.txt"


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(dim) for dim in shape)


def save_checkpoint(directory: str | Path, params: DetectorParams) -> Path:
    """Write one FPCT file per layer plus a manifest; returns the manifest path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cfg = params.config
    lines = [
        f"# config widths={','.join(str(w) for w in cfg.widths)}",
        f"# config fpn_width={cfg.fpn_width}",
        f"# config input_height={cfg.input_height}",
        f"# config input_width={cfg.input_width}",
    ]
    for name, value in params.tensors.items():
        filename = f"{name}.fpct"
        save_tensor(Tensor(value), out / filename)
        lines.append(f"{name} {filename} {_shape_text(value.shape)}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def _config_from_header(entries: dict[str, str]) -> DetectorConfig:
    try:
        return DetectorConfig(
            widths=tuple(int(w) for w in entries["widths"].split(",")),
            fpn_width=int(entries["fpn_width"]),
            input_height=int(entries["input_height"]),
            input_width=int(entries["input_width"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"Checkpoint manifest is missing config key {exc}.") from None
    except ValueError as exc:
        raise CheckpointError(f"Checkpoint manifest has an invalid config: {exc}") from None


def load_checkpoint(directory: str | Path) -> DetectorParams:
    root = Path(directory)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise CheckpointError(f"No checkpoint manifest at '{manifest}'.")

    header: dict[str, str] = {}
    layers: dict[str, tuple[str, str]] = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("# config "):
            key, _, value = line[len("# config ") :].partition("=")
            header[key.strip()] = value.strip()
            continue
        if line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CheckpointError(f"Malformed manifest line '{line}'.")
        layers[parts[0]] = (parts[1], parts[2])

    cfg = _config_from_header(header)
    expected = parameter_shapes(cfg)
    if set(layers) != set(expected):
        missing = sorted(set(expected) - set(layers))
        extra = sorted(set(layers) - set(expected))
        raise CheckpointError(f"Checkpoint layers do not match the detector; missing={missing}, unexpected={extra}.")

    tensors: dict[str, np.ndarray] = {}
    for name, (filename, shape_text) in layers.items():
        if shape_text != _shape_text(expected[name]):
            raise CheckpointError(f"Layer '{name}' declared as {shape_text}, expected {_shape_text(expected[name])}.")
        try:
            tensor = load_tensor(root / filename)
        except (OSError, FormatError) as exc:
            raise CheckpointError(f"Cannot read layer '{name}' from '{filename}': {exc}") from None
        if tensor.shape != expected[name]:
            raise CheckpointError(f"Layer '{name}' file holds shape {tensor.shape}, expected {expected[name]}.")
        tensors[name] = tensor.values.astype(np.float64)
    try:
        return DetectorParams(cfg, tensors)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
