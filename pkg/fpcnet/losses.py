from __future__ import annotations

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .diffops import Tape, Var
from .geometry import Homography, ValidityMask, hom_invert, warp_operator
from .heatmap import TargetMask


DEFAULT_ALPHA = 0.25
DEFAULT_GAMMA = 2.0
DEFAULT_DELTA = 1.0


def softplus(values: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, values)


def _valid_bits(valid: ValidityMask | np.ndarray | None, shape: tuple[int, ...]) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    bits = valid.bits if isinstance(valid, ValidityMask) else np.asarray(valid, dtype=bool)
    if bits.shape != shape:
        bits = bits.reshape(shape) if bits.size == int(np.prod(shape)) else np.broadcast_to(bits, shape)
    return bits


def _target_values(target: TargetMask | np.ndarray) -> np.ndarray:
    return target.values if isinstance(target, TargetMask) else np.asarray(target, dtype=np.float64)


def focal_terms(logits: np.ndarray, target: np.ndarray, alpha: float, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel focal loss and its derivative with respect to the logit."""
    p = expit(logits)
    q = expit(-logits)
    sp_neg = softplus(-logits)
    sp_pos = softplus(logits)
    positive = alpha * q**gamma * sp_neg
    negative = (1.0 - alpha) * p**gamma * sp_pos
    d_positive = -alpha * (gamma * p * q**gamma * sp_neg + q ** (gamma + 1.0))
    d_negative = (1.0 - alpha) * (gamma * q * p**gamma * sp_pos + p ** (gamma + 1.0))
    loss = target * positive + (1.0 - target) * negative
    grad = target * d_positive + (1.0 - target) * d_negative
    return loss, grad


def focal_loss(
    tape: Tape,
    logits: Var,
    target: TargetMask | np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
    valid: ValidityMask | np.ndarray | None = None,
) -> Var:
    """Sigmoid focal loss averaged over valid pixels; soft targets interpolate the two terms."""
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"Focal alpha must lie in (0, 1), got {alpha}.")
    if gamma < 0:
        raise ValueError(f"Focal gamma must be non-negative, got {gamma}.")
    y = _target_values(target)
    if y.shape != logits.shape:
        y = y.reshape(logits.shape)
    bits = _valid_bits(valid, logits.shape)
    count = int(bits.sum())
    if count == 0:
        raise ValueError("Focal loss has no valid pixels.")
    per_pixel, slope = focal_terms(logits.value, y, alpha, gamma)

    def backward(g: np.ndarray) -> None:
        logits.grad += g * np.where(bits, slope, 0.0) / count

    return tape.record(np.array(per_pixel[bits].sum() / count), backward)


def huber(residual: np.ndarray, delta: float = DEFAULT_DELTA) -> np.ndarray:
    magnitude = np.abs(residual)
    return np.where(magnitude <= delta, 0.5 * residual**2, delta * (magnitude - 0.5 * delta))


def huber_mean(tape: Tape, prediction: Var, target: np.ndarray, valid: np.ndarray, delta: float = DEFAULT_DELTA) -> Var:
    count = int(valid.sum())
    if count == 0:
        raise ValueError("Consistency term has an empty valid region.")
    residual = prediction.value - target

    def backward(g: np.ndarray) -> None:
        prediction.grad += g * np.where(valid, np.clip(residual, -delta, delta), 0.0) / count

    return tape.record(np.array(huber(residual[valid], delta).sum() / count), backward)


def kl_valid(tape: Tape, logits: Var, target: np.ndarray, valid: np.ndarray) -> Var:
    """KL(target || prediction) between softmaxes taken jointly over the valid pixels."""
    if int(valid.sum()) < 2:
        raise ValueError("Classification consistency needs at least 2 valid pixels.")
    log_q = log_softmax(logits.value[valid])
    log_r = log_softmax(target[valid])
    r = np.exp(log_r)
    value = float(np.sum(r * (log_r - log_q)))

    def backward(g: np.ndarray) -> None:
        grad = np.zeros_like(logits.value)
        grad[valid] = softmax(logits.value[valid]) - r
        logits.grad += g * grad

    return tape.record(np.array(value), backward)


def _warp_pair(h: Homography, shape: tuple[int, int]):
    height, width = shape
    forward, valid_fwd = warp_operator(h, height, width)
    backward, valid_bwd = warp_operator(hom_invert(h), height, width)
    return forward, valid_fwd, backward, valid_bwd


def _combined(valid: ValidityMask, extra: ValidityMask | np.ndarray | None) -> np.ndarray:
    bits = valid.bits
    if extra is not None:
        bits = bits & _valid_bits(extra, bits.shape)
    return bits


def consistency_loss_regression(
    tape: Tape,
    p: Var,
    p_prime: Var,
    h: Homography,
    m: TargetMask | np.ndarray,
    m_prime: TargetMask | np.ndarray,
    delta: float = DEFAULT_DELTA,
    valid: ValidityMask | np.ndarray | None = None,
    valid_prime: ValidityMask | np.ndarray | None = None,
) -> Var:
    """Huber between sigmoid(warped prediction) and the other view's target, both directions.

    `p` lives in the frame of `m`/`valid`; `h` maps that frame onto the frame of `p_prime`.
    """
    shape = p.shape
    forward, valid_fwd, backward, valid_bwd = _warp_pair(h, shape)
    to_prime = tape.sigmoid(tape.linear_resample(p, forward, shape))
    to_base = tape.sigmoid(tape.linear_resample(p_prime, backward, shape))
    term_prime = huber_mean(tape, to_prime, _target_values(m_prime), _combined(valid_fwd, valid_prime), delta)
    term_base = huber_mean(tape, to_base, _target_values(m), _combined(valid_bwd, valid), delta)
    return tape.add(term_prime, term_base)


def consistency_loss_classification(
    tape: Tape,
    p: Var,
    p_prime: Var,
    h: Homography,
    m: TargetMask | np.ndarray,
    m_prime: TargetMask | np.ndarray,
    valid: ValidityMask | np.ndarray | None = None,
    valid_prime: ValidityMask | np.ndarray | None = None,
) -> Var:
    """Each warped logit map, as one softmax over the valid pixels, against the softmaxed target."""
    shape = p.shape
    forward, valid_fwd, backward, valid_bwd = _warp_pair(h, shape)
    to_prime = tape.linear_resample(p, forward, shape)
    to_base = tape.linear_resample(p_prime, backward, shape)
    term_prime = kl_valid(tape, to_prime, _target_values(m_prime), _combined(valid_fwd, valid_prime))
    term_base = kl_valid(tape, to_base, _target_values(m), _combined(valid_bwd, valid))
    return tape.add(term_prime, term_base)
