from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence
import os

from .benchmark import PREWARP_MODES, SELECTIONS
from .detector import DetectorConfig
from .errors import ConfigError
from .geometry import HomographySamplerConfig
from .matching import RansacConfig
from .synthetic import PhotometricConfig
from .teacher import METHODS
from .training import TrainConfig


ENV_PREFIX = "FPCNET_"
RESOLVED_FILENAME = "config.resolved"


def _parse_bool(value: Any, key: str) -> bool:
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"Config key '{key}' expects a boolean, got '{value}'.")


def _parse_scalar(value: Any, kind: type, key: str) -> Any:
    if kind is bool:
        return _parse_bool(value, key)
    try:
        return kind(str(value).strip()) if kind is not str else str(value).strip()
    except ValueError:
        raise ConfigError(f"Config key '{key}' expects {kind.__name__}, got '{value}'.") from None


def _parse_tuple(value: Any, item_kind: type, key: str) -> tuple[Any, ...]:
    if isinstance(value, (tuple, list)):
        items = list(value)
    else:
        items = [part for part in str(value).split(",") if part.strip()]
    if not items:
        raise ConfigError(f"Config key '{key}' expects a comma-separated list, got '{value}'.")
    return tuple(_parse_scalar(item, item_kind, key) for item in items)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of every command, flat; resolved flag > config file > FPCNET_<KEY> env > default."""

    seed: int = 0

    # detection
    q: float = 0.999
    nms_radius: float = 4.0
    max_k: int = 300
    selection: str = "topk"

    # matching
    match_radius: float = 4.0
    mutual: bool = True
    ransac_threshold: float = 3.0
    ransac_max_iterations: int = 2000
    ransac_confidence: float = 0.995
    ransac_min_iterations: int = 50

    # detector architecture
    widths: tuple[int, ...] = (8, 12, 20, 48)
    fpn_width: int = 32
    input_height: int = 120
    input_width: int = 160

    # training
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 8
    epochs1: int = 10
    epochs2: int = 6
    loss_mode: str = "regression"
    huber_delta: float = 1.0
    gaussian_sigma: float = 1.0
    smoothing_eps: float = 0.1
    consistency_weight: float = 1.0
    consistency_target: str = "smoothed"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    teacher_method: str = "harris"
    teacher_k: float = 0.04
    teacher_top_n: int = 300
    n_shapes: int = 6

    # augmentation
    sampler_perturbation: float = 0.15
    sampler_rotation: float = 0.26
    sampler_scale_range: tuple[float, ...] = (0.8, 1.25)
    sampler_translation: float = 0.1
    photometric: bool = False
    photometric_gain_range: tuple[float, ...] = (0.7, 1.3)
    photometric_bias_range: tuple[float, ...] = (-0.1, 0.1)
    photometric_noise_max: float = 0.02
    photometric_blur_sigma_max: float = 0.0

    # evaluation
    eps_list: tuple[float, ...] = (1.0, 3.0, 8.0)
    budget: int = 300
    pairs: int = 100
    prewarp: str = "none"
    pose_budgets: tuple[int, ...] = (5, 10, 30, 100)
    scenes: int = 50
    stereo_points: int = 100
    stereo_noise_px: float = 0.5
    stereo_outlier_fraction: float = 0.0

    # inspection
    bins: int = 50
    hist_lo: float = -10.0
    hist_hi: float = 10.0

    def __post_init__(self) -> None:
        for key, value, allowed in (
            ("selection", self.selection, SELECTIONS),
            ("prewarp", self.prewarp, PREWARP_MODES),
            ("teacher_method", self.teacher_method, METHODS),
        ):
            if value not in allowed:
                raise ConfigError(f"Unknown {key} '{value}'. Expected one of: {', '.join(allowed)}.")
        if self.bins < 1 or self.hist_hi <= self.hist_lo:
            raise ConfigError(f"Histogram needs bins >= 1 and hist_lo < hist_hi, got {self.bins}, {self.hist_lo}, {self.hist_hi}.")
        try:
            self.ransac_config()
            self.detector_config()
            self.train_config()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"Invalid configuration: {exc}") from None

    def ransac_config(self) -> RansacConfig:
        return RansacConfig(
            threshold=self.ransac_threshold,
            max_iterations=self.ransac_max_iterations,
            confidence=self.ransac_confidence,
            seed=self.seed,
            min_iterations=self.ransac_min_iterations,
        )

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            widths=self.widths,
            fpn_width=self.fpn_width,
            input_height=self.input_height,
            input_width=self.input_width,
        )

    def sampler_config(self) -> HomographySamplerConfig:
        return HomographySamplerConfig(
            perturbation=self.sampler_perturbation,
            rotation=self.sampler_rotation,
            scale_range=_pair(self.sampler_scale_range, "sampler_scale_range"),
            translation=self.sampler_translation,
        )

    def photometric_config(self) -> PhotometricConfig | None:
        """Training augmentation; None unless `photometric` is on."""
        return self.photometric_values() if self.photometric else None

    def photometric_values(self) -> PhotometricConfig:
        return PhotometricConfig(
            gain_range=_pair(self.photometric_gain_range, "photometric_gain_range"),
            bias_range=_pair(self.photometric_bias_range, "photometric_bias_range"),
            noise_max=self.photometric_noise_max,
            blur_sigma_max=self.photometric_blur_sigma_max,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps_adam=self.eps_adam,
            batch_size=self.batch_size,
            epochs1=self.epochs1,
            epochs2=self.epochs2,
            loss_mode=self.loss_mode,  # type: ignore[arg-type]
            huber_delta=self.huber_delta,
            gaussian_sigma=self.gaussian_sigma,
            smoothing_eps=self.smoothing_eps,
            consistency_weight=self.consistency_weight,
            consistency_target=self.consistency_target,  # type: ignore[arg-type]
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            seed=self.seed,
            sampler=self.sampler_config(),
            photometric=self.photometric_config(),
        )

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def resolved_text(self, comments: Sequence[str] = ()) -> str:
        lines = ["# fpcnet resolved configuration", *(f"# {comment}" for comment in comments)]
        lines.extend(f"{key} = {_format_value(value)}" for key, value in sorted(self.as_dict().items()))
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir: str | Path, comments: Sequence[str] = ()) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / RESOLVED_FILENAME
        path.write_text(self.resolved_text(comments), encoding="utf-8")
        return path


def _pair(values: tuple[float, ...], key: str) -> tuple[float, float]:
    if len(values) != 2:
        raise ConfigError(f"Config key '{key}' expects two values, got {len(values)}.")
    return (float(values[0]), float(values[1]))


_DEFAULTS = RunConfig()
KNOWN_KEYS = tuple(f.name for f in fields(RunConfig))


def _coerce(key: str, value: Any) -> Any:
    if key not in KNOWN_KEYS:
        raise ConfigError(f"Unknown config key '{key}'. Expected one of: {', '.join(sorted(KNOWN_KEYS))}.")
    default = getattr(_DEFAULTS, key)
    if isinstance(default, tuple):
        return _parse_tuple(value, type(default[0]), key)
    return _parse_scalar(value, type(default), key)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """`key = value` lines, `#` comments; values are coerced to the field types."""
    entries: dict[str, Any] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got '{raw.strip()}'.")
        key = key.strip()
        entries[key] = _coerce(key, value.strip())
    return entries


def load_config_file(path: str | Path) -> dict[str, Any]:
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config file '{config_path}': {exc}") from None
    return parse_config_text(text, str(config_path))


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    entries: dict[str, Any] = {}
    for key in KNOWN_KEYS:
        value = environ.get(ENV_PREFIX + key.upper())
        if value is not None and value.strip():
            entries[key] = _coerce(key, value)
    return entries


def resolve_config(
    flags: Mapping[str, Any] | None = None,
    config_path: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Flags win over the config file, which wins over the environment, which wins over defaults.

    Flags whose value is None count as unset.
    """
    merged = env_overrides(environ)
    if config_path is not None:
        merged.update(load_config_file(config_path))
    for key, value in (flags or {}).items():
        if value is not None:
            merged[key] = _coerce(key, value)
    return replace(_DEFAULTS, **merged)
