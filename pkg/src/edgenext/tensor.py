"""Dense numerical primitives on channels-last ``(n, H, W, C)`` arrays.

Every function here is pure: inputs are never modified and the result is a
fresh array.  Tensors are plain :class:`numpy.ndarray` objects of dtype
``float32`` or ``float64``.  Setting ``EDGENEXT_DEBUG=1`` in the environment
turns on a finite-value check after each primitive.
"""
from __future__ import annotations

import functools
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erfc

__all__ = [
    "ConvSpec",
    "DimensionError",
    "conv2d",
    "conv_output_size",
    "linear",
    "layer_norm",
    "batch_norm",
    "batch_moments",
    "gelu",
    "hard_swish",
    "activation",
    "softmax",
    "l2_normalize",
    "matmul",
    "global_avg_pool",
    "add_residual",
]

def debug_enabled() -> bool:
    return os.environ.get("EDGENEXT_DEBUG", "") not in ("", "0")


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


def _checked(fn):
    """Raise on non-finite outputs when ``EDGENEXT_DEBUG`` is set."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if debug_enabled() and not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{fn.__name__} produced non-finite values")
        return out

    return wrapper


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution.

    ``padding`` is ``(top, bottom, left, right)``; an int means the same
    padding on every side.  ``groups == in_channels == out_channels`` is the
    depthwise case.
    """

    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int | tuple[int, int, int, int] = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.groups < 1:
            raise ValueError(f"invalid conv geometry {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise DimensionError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible "
                f"by groups={self.groups}"
            )
        if isinstance(self.padding, int):
            object.__setattr__(self, "padding", (self.padding,) * 4)
        elif len(self.padding) != 4:
            raise ValueError("padding must be an int or (top, bottom, left, right)")
        if min(self.padding) < 0:
            raise ValueError("padding must be non-negative")

    @classmethod
    def same(cls, kernel: int, channels: int) -> "ConvSpec":
        """Depthwise, stride 1, ``(k-1)/2`` zero padding per side (odd k)."""
        if kernel % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel, got {kernel}")
        return cls(kernel, channels, channels, 1, (kernel - 1) // 2, channels)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel
        return (k, k, self.in_channels // self.groups, self.out_channels)


def conv_output_size(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (size + pad_lo + pad_hi - kernel) // stride + 1


def _check_conv(x, w, b, spec: ConvSpec):
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (n, H, W, C) input, got shape {x.shape}")
    if x.shape[3] != spec.in_channels:
        raise DimensionError(
            f"conv2d input has {x.shape[3]} channels, spec expects {spec.in_channels}"
        )
    if w.shape != spec.weight_shape:
        raise DimensionError(f"conv2d weight shape {w.shape} != expected {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({spec.out_channels},)")
    top, bot, left, right = spec.padding
    ho = conv_output_size(x.shape[1], spec.kernel, spec.stride, top, bot)
    wo = conv_output_size(x.shape[2], spec.kernel, spec.stride, left, right)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be empty: input {x.shape[1]}x{x.shape[2]}, "
            f"kernel {spec.kernel}, stride {spec.stride}, padding {spec.padding}"
        )
    return ho, wo


def _pad(x, padding):
    top, bot, left, right = padding
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (top, bot), (left, right), (0, 0)))


def _windows(xp, k, stride, ho, wo):
    # (n, ho, wo, C, k, k) view of every receptive field
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


@_checked
def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Grouped 2-D cross-correlation with explicit zero padding.

    ``w`` has shape ``(k, k, Cin/groups, Cout)``.  The depthwise case slides
    each tap over the padded input; every other case contracts the window
    view against the weights group by group.
    """
    ho, wo = _check_conv(x, w, b, spec)
    k, s = spec.kernel, spec.stride
    xp = _pad(x, spec.padding)
    if spec.depthwise:
        out = np.zeros((x.shape[0], ho, wo, spec.out_channels), dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                out += xp[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] * w[i, j, 0]
    else:
        win = _windows(xp, k, s, ho, wo)
        cin_g = spec.in_channels // spec.groups
        cout_g = spec.out_channels // spec.groups
        parts = []
        for g in range(spec.groups):
            wg = w[:, :, :, g * cout_g : (g + 1) * cout_g]
            xg = win[:, :, :, g * cin_g : (g + 1) * cin_g]
            parts.append(np.tensordot(xg, wg, axes=([4, 5, 3], [0, 1, 2])))
        out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)
    if b is not None:
        out = out + b
    return out


@_checked
def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Per-position affine map over the last axis: ``x @ w + b``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input channels {x.shape[-1]} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    y = x @ w
    return y if b is None else y + b


@_checked
def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalize each position across the channel (last) axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gamma/beta must have length {x.shape[-1]}")
    xhat, _ = normalize_parts(x, (x.ndim - 1,), eps)
    return xhat * gamma + beta


def normalize_parts(x, axes, eps, mean=None, var=None):
    """Return ``(xhat, std)`` with ``xhat = (x - mean) / std``.

    Moments are taken over ``axes`` unless supplied.  Shared by the plain and
    taped normalization paths so both produce identical bits.
    """
    if mean is None:
        mean = x.mean(axis=axes, keepdims=True)
        var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    std = np.sqrt(var + eps)
    return (x - mean) / std, std


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over every axis but the last."""
    axes = tuple(range(x.ndim - 1))
    mu = x.mean(axis=axes)
    return mu, ((x - mu) ** 2).mean(axis=axes)


@_checked
def batch_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-5,
    mean: np.ndarray | None = None,
    var: np.ndarray | None = None,
) -> np.ndarray:
    """Per-channel normalization across ``(n, H, W)``.

    With ``mean``/``var`` given this is inference mode on running statistics;
    without them the batch's own moments are used (training mode).  Running
    statistic updates are the caller's job, see :func:`batch_moments`.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must have length {c}")
    if (mean is None) != (var is None):
        raise ValueError("batch_norm needs both mean and var, or neither")
    if mean is not None and np.any(var < 0):
        raise ValueError("batch_norm: running variance is negative")
    xhat, _ = normalize_parts(x, tuple(range(x.ndim - 1)), eps, mean, var)
    return xhat * gamma + beta


@_checked
def gelu(x: np.ndarray) -> np.ndarray:
    # erfc(-z) == 1 + erf(z) without cancellation in the negative tail
    return 0.5 * x * erfc(-x / np.sqrt(2.0))


@_checked
def hard_swish(x: np.ndarray) -> np.ndarray:
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "gelu":
        return gelu(x)
    if kind == "hard_swish":
        return hard_swish(x)
    raise ValueError(f"unknown activation {kind!r}")


@_checked
def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _safe_norm(x, axis):
    # scale by the largest magnitude so tiny or huge slices neither underflow nor overflow
    m = np.abs(x).max(axis=axis, keepdims=True)
    m = np.where(m > 0, m, 1.0)
    n = m * np.sqrt(((x / m) ** 2).sum(axis=axis, keepdims=True))
    # zero slices pass through unchanged
    return np.where(n > 0, n, 1.0).astype(x.dtype, copy=False)


@_checked
def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale every slice along ``axis`` to unit Euclidean norm."""
    return x / _safe_norm(x, axis)


@_checked
def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes; leading axes must match."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} vs {b.shape}")
    return a @ b


@_checked
def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """``(n, H, W, C) -> (n, C)`` spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects rank 4, got {x.shape}")
    return x.mean(axis=(1, 2))


@_checked
def add_residual(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise DimensionError(f"residual shapes differ: {x.shape} vs {y.shape}")
    return x + y
