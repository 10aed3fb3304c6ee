from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import expit

from .geometry import keys_weights


BN_MOMENTUM = 0.9
BN_EPS = 1e-5

Backward = Callable[[np.ndarray], None]


@dataclass(eq=False)
class Var:
    """Tape value plus its accumulated gradient (same shape, float64)."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    name: str = ""

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    def item(self) -> float:
        return float(self.value)


@lru_cache(maxsize=64)
def bicubic_upsample_matrix(size: int) -> np.ndarray:
    """(2n, n) Keys a=-0.5 interpolation matrix, half-pixel centers, clamped borders."""
    out = np.arange(2 * size)
    src = (out + 0.5) / 2.0 - 0.5
    base = np.floor(src).astype(np.int64)
    weights = keys_weights(src - base)
    matrix = np.zeros((2 * size, size))
    for tap in range(4):
        np.add.at(matrix, (out, np.clip(base - 1 + tap, 0, size - 1)), weights[:, tap])
    matrix.setflags(write=False)
    return matrix


class Tape:
    """Records operations in order; `backward` replays them in reverse."""

    def __init__(self) -> None:
        self._nodes: list[tuple[Var, Backward]] = []
        self.stat_updates: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, value: np.ndarray | float, name: str = "") -> Var:
        return Var(np.array(value, dtype=np.float64), name=name)

    def record(self, value: np.ndarray, backward: Backward) -> Var:
        out = Var(value)
        self._nodes.append((out, backward))
        return out

    def backward(self, *roots: Var) -> None:
        for root in roots:
            root.grad += np.ones_like(root.value)
        for out, step in reversed(self._nodes):
            if out.grad.any():
                step(out.grad)

    # -- layers ---------------------------------------------------------------

    def conv2d(self, x: Var, w: Var, b: Var | None = None, stride: int = 1, pad: int = 0) -> Var:
        n, channels, height, width = x.shape
        out_ch, in_ch, kh, kw = w.shape
        if in_ch != channels or kh != kw:
            raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}.")
        padded = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out_h = (height + 2 * pad - kh) // stride + 1
        out_w = (width + 2 * pad - kw) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {w.shape}.")
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
        value = np.einsum("nchwij,ocij->nohw", windows, w.value, optimize=True)
        if b is not None:
            value = value + b.value[None, :, None, None]

        def backward(g: np.ndarray) -> None:
            w.grad += np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
            if b is not None:
                b.grad += g.sum(axis=(0, 2, 3))
            dwin = np.einsum("nohw,ocij->nchwij", g, w.value, optimize=True)
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dwin[..., i, j]
            x.grad += dpad[:, :, pad : pad + height, pad : pad + width]

        return self.record(value, backward)

    def conv1x1(self, x: Var, w: Var, b: Var | None = None) -> Var:
        if w.value.ndim != 2 or w.shape[1] != x.shape[1]:
            raise ValueError(f"conv1x1 shape mismatch: input {x.shape}, kernel {w.shape}.")
        value = np.einsum("nchw,oc->nohw", x.value, w.value, optimize=True)
        if b is not None:
            value = value + b.value[None, :, None, None]

        def backward(g: np.ndarray) -> None:
            w.grad += np.einsum("nchw,nohw->oc", x.value, g, optimize=True)
            if b is not None:
                b.grad += g.sum(axis=(0, 2, 3))
            x.grad += np.einsum("nohw,oc->nchw", g, w.value, optimize=True)

        return self.record(value, backward)

    def relu(self, x: Var) -> Var:
        active = x.value > 0

        def backward(g: np.ndarray) -> None:
            x.grad += g * active

        return self.record(np.where(active, x.value, 0.0), backward)

    def sigmoid(self, x: Var) -> Var:
        value = expit(x.value)

        def backward(g: np.ndarray) -> None:
            x.grad += g * value * (1.0 - value)

        return self.record(value, backward)

    def batch_norm(
        self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: np.ndarray,
        running_var: np.ndarray,
        train: bool,
        name: str = "",
    ) -> Var:
        """Per-channel normalization over (N, H, W); train mode records updated running stats."""
        n, channels = x.shape[0], x.shape[1]
        if gamma.shape != (channels,) or beta.shape != (channels,):
            raise ValueError(f"batch_norm expects ({channels},) scale/shift, got {gamma.shape} and {beta.shape}.")
        shape = (1, channels, 1, 1)
        if train:
            if n < 2:
                raise ValueError(f"batch_norm in train mode needs a batch of at least 2, got {n}.")
            mean = x.value.mean(axis=(0, 2, 3))
            var = x.value.var(axis=(0, 2, 3))
            if name:
                self.stat_updates[f"{name}.running_mean"] = BN_MOMENTUM * running_mean + (1.0 - BN_MOMENTUM) * mean
                self.stat_updates[f"{name}.running_var"] = BN_MOMENTUM * running_var + (1.0 - BN_MOMENTUM) * var
        else:
            mean, var = np.asarray(running_mean), np.asarray(running_var)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.value - mean.reshape(shape)) * inv_std.reshape(shape)
        value = gamma.value.reshape(shape) * xhat + beta.value.reshape(shape)
        count = x.value.size // channels

        def backward(g: np.ndarray) -> None:
            gamma.grad += np.sum(g * xhat, axis=(0, 2, 3))
            beta.grad += g.sum(axis=(0, 2, 3))
            dxhat = g * gamma.value.reshape(shape)
            if train:
                total = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                dot = np.sum(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
                x.grad += (inv_std.reshape(shape) / count) * (count * dxhat - total - xhat * dot)
            else:
                x.grad += dxhat * inv_std.reshape(shape)

        return self.record(value, backward)

    def upsample_bicubic2x(self, x: Var) -> Var:
        up_h = bicubic_upsample_matrix(x.shape[2])
        up_w = bicubic_upsample_matrix(x.shape[3])
        value = np.einsum("ih,nchw,jw->ncij", up_h, x.value, up_w, optimize=True)

        def backward(g: np.ndarray) -> None:
            x.grad += np.einsum("ih,ncij,jw->nchw", up_h, g, up_w, optimize=True)

        return self.record(value, backward)

    def crop(self, x: Var, height: int, width: int) -> Var:
        if height > x.shape[-2] or width > x.shape[-1]:
            raise ValueError(f"Cannot crop {x.shape} to {height}x{width}.")

        def backward(g: np.ndarray) -> None:
            x.grad[..., :height, :width] += g

        return self.record(x.value[..., :height, :width].copy(), backward)

    def add(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}.")

        def backward(g: np.ndarray) -> None:
            a.grad += g
            b.grad += g

        return self.record(a.value + b.value, backward)

    def scale(self, x: Var, factor: float) -> Var:
        def backward(g: np.ndarray) -> None:
            x.grad += g * factor

        return self.record(x.value * factor, backward)

    def sum(self, x: Var) -> Var:
        def backward(g: np.ndarray) -> None:
            x.grad += g

        return self.record(np.array(x.value.sum()), backward)

    def index(self, x: Var, sample: int, channel: int = 0) -> Var:
        """The 2-D map x[sample, channel] of an NCHW value."""

        def backward(g: np.ndarray) -> None:
            x.grad[sample, channel] += g

        return self.record(x.value[sample, channel].copy(), backward)

    def linear_resample(self, x: Var, operator: sparse.spmatrix, shape: tuple[int, int]) -> Var:
        """Apply a fixed sparse linear map to a 2-D value; the gradient is the transpose."""
        if operator.shape[1] != x.value.size:
            raise ValueError(f"Resample operator expects {operator.shape[1]} inputs, got {x.value.size}.")
        value = (operator @ x.value.ravel()).reshape(shape)

        def backward(g: np.ndarray) -> None:
            x.grad += (operator.T @ g.ravel()).reshape(x.shape)

        return self.record(value, backward)


def _evaluate(build: Callable[..., Var], arrays: Sequence[np.ndarray]) -> float:
    tape = Tape()
    return float(build(tape, *[tape.variable(a) for a in arrays]).value)


def gradient_check(build: Callable[..., Var], arrays: Sequence[np.ndarray], step: float = 1e-3) -> float:
    """Max relative error between tape gradients and central finite differences.

    `build(tape, *vars)` must return a scalar Var. Each input's error is scaled by its largest
    gradient magnitude.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tape = Tape()
    inputs = [tape.variable(a.copy()) for a in arrays]
    tape.backward(build(tape, *inputs))

    worst = 0.0
    for position, var in enumerate(inputs):
        numeric = np.zeros_like(var.value)
        for idx in np.ndindex(var.value.shape):
            shifted = [a.copy() for a in arrays]
            shifted[position][idx] += step
            upper = _evaluate(build, shifted)
            shifted[position][idx] -= 2.0 * step
            lower = _evaluate(build, shifted)
            numeric[idx] = (upper - lower) / (2.0 * step)
        scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(var.grad))), 1e-12)
        worst = max(worst, float(np.max(np.abs(numeric - var.grad))) / scale)
    return worst
