from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Literal, Sequence

import numpy as np

from .detector import DetectorParams, check_input_shape, detector_forward, network, running_stats
from .diffops import Tape, Var
from .errors import DivergenceError
from .geometry import HomographySamplerConfig, sample_homography, warp_array, warp_image, warp_keypoint_mask
from .heatmap import TargetMask, gaussian_filter, label_smooth
from .losses import consistency_loss_classification, consistency_loss_regression, focal_loss
from .models import ImageGray, Rng
from .optim import AdamState, adam_step
from .synthetic import PhotometricConfig, apply_photometric
from .tracing import EventLog, NoopTraceLogger


LOSS_MODES = ("regression", "classification")
CONSISTENCY_TARGETS = ("smoothed", "binary")
LOSS_HEADER = "stage,epoch,batch,loss"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 8
    epochs1: int = 10
    epochs2: int = 6
    loss_mode: Literal["regression", "classification"] = "regression"
    huber_delta: float = 1.0
    gaussian_sigma: float = 1.0
    smoothing_eps: float = 0.1
    consistency_weight: float = 1.0
    consistency_target: Literal["smoothed", "binary"] = "smoothed"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    sampler: HomographySamplerConfig = field(default_factory=HomographySamplerConfig)
    photometric: PhotometricConfig | None = None

    def __post_init__(self) -> None:
        if self.epochs1 < 1 or self.epochs2 < 1:
            raise ValueError(f"Epoch counts must be positive, got {self.epochs1} and {self.epochs2}.")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2 for batch norm, got {self.batch_size}.")
        if self.consistency_weight < 0:
            raise ValueError(f"consistency_weight must be non-negative, got {self.consistency_weight}.")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"Unknown loss mode '{self.loss_mode}'. Expected one of: {', '.join(LOSS_MODES)}.")
        if self.consistency_target not in CONSISTENCY_TARGETS:
            raise ValueError(
                f"Unknown consistency target '{self.consistency_target}'. Expected one of: {', '.join(CONSISTENCY_TARGETS)}."
            )

    def as_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["sampler"] = self.sampler.as_dict()
        payload["photometric"] = self.photometric.as_dict() if self.photometric else None
        return payload


@dataclass(frozen=True, eq=False)
class TrainingSample:
    image: ImageGray
    mask: TargetMask


@dataclass(frozen=True)
class LossRow:
    stage: int
    epoch: int
    batch: int
    loss: float


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: DetectorParams
    trace: list[LossRow]

    def epoch_losses(self, stage: int) -> list[float]:
        epochs: dict[int, list[float]] = {}
        for row in self.trace:
            if row.stage == stage:
                epochs.setdefault(row.epoch, []).append(row.loss)
        return [float(np.mean(epochs[e])) for e in sorted(epochs)]

    @property
    def final_loss(self) -> float:
        return self.trace[-1].loss


def loss_csv(rows: Sequence[LossRow]) -> str:
    lines = [LOSS_HEADER] + [f"{r.stage},{r.epoch},{r.batch},{repr(float(r.loss))}" for r in rows]
    return "\n".join(lines) + "\n"


def batch_indices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive chunks of `order`; a trailing singleton joins the previous chunk."""
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _check_dataset(dataset: Sequence[TrainingSample]) -> tuple[int, int]:
    if len(dataset) < 2:
        raise ValueError(f"Training needs at least 2 samples, got {len(dataset)}.")
    height, width = dataset[0].image.height, dataset[0].image.width
    check_input_shape(height, width)
    for sample in dataset:
        if (sample.image.height, sample.image.width) != (height, width) or sample.mask.shape != (height, width):
            raise ValueError("All training images and masks must share one shape.")
    return height, width


def _guard(value: float, stage: int, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"Stage {stage} loss became non-finite at epoch {epoch}, batch {batch}.")


class _Optimizer:
    def __init__(self, params: DetectorParams, tcfg: TrainConfig) -> None:
        self.params = params
        self.values = params.trainable()
        self.stats = running_stats(params)
        self.state = AdamState.zeros(self.values)
        self.tcfg = tcfg

    def step(self, tape: Tape, variables: dict[str, Var], stage: int, epoch: int, batch: int) -> None:
        grads = {name: var.grad for name, var in variables.items()}
        for name, grad in grads.items():
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(f"Stage {stage} gradient for '{name}' became non-finite at epoch {epoch}, batch {batch}.")
        cfg = self.tcfg
        self.values, self.state = adam_step(self.values, grads, self.state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
        self.stats = {**self.stats, **tape.stat_updates}

    def result(self) -> DetectorParams:
        return self.params.with_values({**self.values, **self.stats})

    def variables(self, tape: Tape) -> dict[str, Var]:
        return {name: tape.variable(value, name=name) for name, value in self.values.items()}


def train_stage1(
    dataset: Sequence[TrainingSample],
    params: DetectorParams,
    tcfg: TrainConfig,
    trace_logger: EventLog | None = None,
) -> TrainResult:
    """Focal-loss supervision of the detector by teacher masks."""
    trace_logger = trace_logger or NoopTraceLogger()
    _check_dataset(dataset)
    rng = Rng(tcfg.seed).child(1)
    opt = _Optimizer(params, tcfg)
    images = np.stack([s.image.pixels for s in dataset])
    masks = np.stack([s.mask.values for s in dataset])[:, None]
    rows: list[LossRow] = []
    trace_logger.log("train.start", stage=1, samples=len(dataset), epochs=tcfg.epochs1)
    for epoch in range(tcfg.epochs1):
        for batch, idx in enumerate(batch_indices(rng.permutation(len(dataset)), tcfg.batch_size)):
            tape = Tape()
            variables = opt.variables(tape)
            logits = network(tape, params.config, variables, opt.stats, images[idx], train=True)
            loss = focal_loss(tape, logits, masks[idx], tcfg.focal_alpha, tcfg.focal_gamma)
            value = loss.item()
            _guard(value, 1, epoch, batch)
            tape.backward(loss)
            opt.step(tape, variables, 1, epoch, batch)
            rows.append(LossRow(1, epoch, batch, value))
            trace_logger.log("train.batch", stage=1, epoch=epoch, batch=batch, loss=value)
        trace_logger.log("train.epoch", stage=1, epoch=epoch, loss=float(np.mean([r.loss for r in rows if r.epoch == epoch])))
    result = TrainResult(opt.result(), rows)
    trace_logger.log("train.end", stage=1, final_loss=result.final_loss)
    return result


def stage2_targets(mask: TargetMask, tcfg: TrainConfig) -> TargetMask:
    return label_smooth(gaussian_filter(mask, tcfg.gaussian_sigma), tcfg.smoothing_eps)


def train_stage2(
    dataset: Sequence[TrainingSample],
    params: DetectorParams,
    tcfg: TrainConfig,
    trace_logger: EventLog | None = None,
) -> TrainResult:
    """Focal loss on both views of a random homography plus the weighted consistency term."""
    trace_logger = trace_logger or NoopTraceLogger()
    height, width = _check_dataset(dataset)
    params = params.rounded()
    rng = Rng(tcfg.seed).child(2)
    opt = _Optimizer(params, tcfg)
    rows: list[LossRow] = []
    trace_logger.log(
        "train.start", stage=2, samples=len(dataset), epochs=tcfg.epochs2, loss_mode=tcfg.loss_mode,
        consistency_weight=tcfg.consistency_weight,
    )
    for epoch in range(tcfg.epochs2):
        for batch, idx in enumerate(batch_indices(rng.permutation(len(dataset)), tcfg.batch_size)):
            views = [_warped_view(dataset[i], tcfg, rng, width, height) for i in idx]
            tape = Tape()
            variables = opt.variables(tape)
            batch_a = np.stack([dataset[i].image.pixels for i in idx])
            batch_b = np.stack([view["image_b"] for view in views])
            logits_a = network(tape, params.config, variables, opt.stats, batch_a, train=True)
            # Both branches share one BN module; the warped branch sees the stats after the clean one.
            stats_after_a = {**opt.stats, **tape.stat_updates}
            logits_b = network(tape, params.config, variables, stats_after_a, batch_b, train=True)

            targets_a = np.stack([view["target_a"].values for view in views])[:, None]
            targets_b = np.stack([view["target_b"].values for view in views])[:, None]
            valid_b = np.stack([view["valid_b"] for view in views])[:, None]
            loss = tape.add(
                focal_loss(tape, logits_a, targets_a, tcfg.focal_alpha, tcfg.focal_gamma),
                focal_loss(tape, logits_b, targets_b, tcfg.focal_alpha, tcfg.focal_gamma, valid=valid_b),
            )
            if tcfg.consistency_weight > 0:
                terms = [_consistency(tape, logits_a, logits_b, n, view, tcfg) for n, view in enumerate(views)]
                total = terms[0]
                for term in terms[1:]:
                    total = tape.add(total, term)
                loss = tape.add(loss, tape.scale(total, tcfg.consistency_weight / len(views)))
            value = loss.item()
            _guard(value, 2, epoch, batch)
            tape.backward(loss)
            opt.step(tape, variables, 2, epoch, batch)
            rows.append(LossRow(2, epoch, batch, value))
            trace_logger.log("train.batch", stage=2, epoch=epoch, batch=batch, loss=value)
        trace_logger.log("train.epoch", stage=2, epoch=epoch, loss=float(np.mean([r.loss for r in rows if r.epoch == epoch])))
    result = TrainResult(opt.result(), rows)
    trace_logger.log("train.end", stage=2, final_loss=result.final_loss)
    return result


def _warped_view(sample: TrainingSample, tcfg: TrainConfig, rng: Rng, width: int, height: int) -> dict[str, Any]:
    h = sample_homography(tcfg.sampler, width, height, rng)
    image_b, valid_b = warp_image(sample.image, h, "bilinear")
    if tcfg.photometric is not None:
        image_b = apply_photometric(image_b, tcfg.photometric, rng)
    mask_b = TargetMask(warp_keypoint_mask(sample.mask.values > 0.5, h), "binary")
    binary_a = TargetMask((sample.mask.values > 0.5).astype(np.float64), "binary")
    target_a = stage2_targets(binary_a, tcfg)
    target_b = stage2_targets(mask_b, tcfg)
    smoothed = tcfg.consistency_target == "smoothed"
    return {
        "h": h,
        "image_b": image_b.pixels,
        "valid_b": valid_b.bits,
        "target_a": target_a,
        "target_b": target_b,
        "consistency_a": target_a if smoothed else binary_a,
        "consistency_b": target_b if smoothed else mask_b,
    }


def _consistency(tape: Tape, logits_a: Var, logits_b: Var, n: int, view: dict[str, Any], tcfg: TrainConfig) -> Var:
    p = tape.index(logits_a, n)
    p_prime = tape.index(logits_b, n)
    if tcfg.loss_mode == "regression":
        return consistency_loss_regression(
            tape, p, p_prime, view["h"], view["consistency_a"], view["consistency_b"], tcfg.huber_delta,
            valid_prime=view["valid_b"],
        )
    return consistency_loss_classification(
        tape, p, p_prime, view["h"], view["consistency_a"], view["consistency_b"], valid_prime=view["valid_b"]
    )


def consistency_residual(params: DetectorParams, images: Sequence[ImageGray], sampler: HomographySamplerConfig, seed: int) -> float:
    """Mean |sigmoid(p') - warp(sigmoid(p))| over valid pixels of held-out warps."""
    rng = Rng(seed)
    residuals = []
    for index, img in enumerate(images):
        h = sample_homography(sampler, img.width, img.height, rng.child(index))
        image_b, _ = warp_image(img, h, "bilinear")
        prob_a = detector_forward(params, img).probabilities()
        prob_b = detector_forward(params, image_b).probabilities()
        warped, valid = warp_array(prob_a, h)
        residuals.append(float(np.mean(np.abs(prob_b - warped)[valid.bits])))
    return float(np.mean(residuals))
