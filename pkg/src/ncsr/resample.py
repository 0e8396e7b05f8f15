"""Separable image resampling: bicubic interpolation and area averaging.

Bicubic uses the Catmull-Rom-family cubic with a = -0.5 and clamped
edges. Downscaling stretches the kernel by the inverse scale
(anti-aliased convention, as in MATLAB's ``imresize``), which is the
degradation model the rest of the package assumes for HR -> LR pairs.
Each axis is resampled by a precomputed weight matrix whose rows are
normalized to sum to one, so constant images are preserved exactly.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Piecewise cubic with support (-2, 2)."""
    at = np.abs(t)
    at2 = at * at
    at3 = at2 * at
    near = (a + 2.0) * at3 - (a + 3.0) * at2 + 1.0
    far = a * at3 - 5.0 * a * at2 + 8.0 * a * at - 4.0 * a
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def _axis_weights(n_in: int, n_out: int, a: float) -> np.ndarray:
    """(n_out, n_in) resampling matrix for one axis, rows summing to 1."""
    scale = n_out / n_in
    # Kernel is stretched when shrinking so that it averages over the
    # footprint of each output pixel (anti-aliasing).
    k_scale = min(scale, 1.0)
    support = 2.0 / k_scale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(int) + 1
    n_taps = int(np.ceil(2.0 * support)) + 2
    taps = left[:, None] + np.arange(n_taps)[None, :]
    weights = cubic_kernel((centers[:, None] - taps) * k_scale, a)
    weights /= weights.sum(axis=1, keepdims=True)
    taps = np.clip(taps, 0, n_in - 1)  # edge clamp
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), n_taps)
    np.add.at(mat, (rows, taps.ravel()), weights.ravel())
    return mat


def _target_len(n: int, scale: Fraction | float) -> int:
    exact = n * Fraction(scale).limit_denominator(10**6)
    if exact.denominator != 1:
        raise ShapeError(f"resize of length {n} by scale {scale} is not integral")
    out = int(exact)
    if out < 1:
        raise ShapeError(f"resize of length {n} by scale {scale} collapses to zero")
    return out


def bicubic_resize(image: Tensor, scale: Fraction | float, kernel_a: float = -0.5) -> Tensor:
    """Resample (N, C, H, W) by ``scale`` in both spatial axes.

    The output size must be exactly integral; non-integral targets are a
    contract violation. No gradient is tracked (the resampler feeds data
    preparation and metrics, not the flow itself).
    """
    n, c, h, w = image.shape
    oh, ow = _target_len(h, scale), _target_len(w, scale)
    mh = _axis_weights(h, oh, kernel_a)
    mw = _axis_weights(w, ow, kernel_a)
    out = np.matmul(mh, image.data)          # (N, C, oh, W)
    out = np.matmul(out, mw.T)               # (N, C, oh, ow)
    return Tensor(out)


def area_downsample(image: Tensor, factor: int) -> Tensor:
    """Block-average by an integer factor; exact variance of i.i.d. noise
    shrinks by factor^2 per axis pair, which matched-noise training relies on."""
    n, c, h, w = image.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"area_downsample: {h}x{w} not divisible by factor {factor}")
    blocks = image.data.reshape(n, c, h // factor, factor, w // factor, factor)
    return Tensor(blocks.mean(axis=(3, 5)))
