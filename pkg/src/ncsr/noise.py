"""Training-time noise protocol and dequantization.

One draw produces the triple (c, v, w): a noise magnitude c uniform on
[0, M], an HR-shaped Gaussian noise field v with standard deviation c,
and its LR-shaped counterpart w obtained by area-averaging v down by the
scale factor. The same v underlies both perturbations: x gets v, y gets
w, keeping the pair consistently degraded. Inference always uses the
exact-zero triple.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .resample import area_downsample
from .rng import Rng
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class NoiseSample:
    """One draw of the noise protocol: magnitude, HR field, LR field."""

    c: float
    v: Tensor
    w: Tensor
    bound: float  # the configured upper limit M


def draw(rng: Rng, hr_shape: tuple[int, int, int, int],
         lr_shape: tuple[int, int, int, int], bound: float) -> NoiseSample:
    """Sample c ~ U(0, M), v ~ N(0, c^2 I) at HR shape, w = area-mean of v.

    The spatial ratio between hr_shape and lr_shape must be an integer
    and equal in both axes.
    """
    if bound < 0:
        raise ValueError(f"noise bound must be >= 0, got {bound}")
    if hr_shape[0] != lr_shape[0] or hr_shape[1] != lr_shape[1]:
        raise ShapeError(f"batch/channel mismatch between HR {hr_shape} and LR {lr_shape}")
    factor = hr_shape[2] // lr_shape[2]
    if factor * lr_shape[2] != hr_shape[2] or factor * lr_shape[3] != hr_shape[3]:
        raise ShapeError(f"HR {hr_shape} is not an integer multiple of LR {lr_shape}")
    c = rng.uniform() * bound
    v = Tensor(rng.gaussian(hr_shape, sigma=c))
    w = area_downsample(v, factor)
    return NoiseSample(c=c, v=v, w=w, bound=bound)


def draw_batch(rng: Rng, hr_shape: tuple[int, int, int, int],
               lr_shape: tuple[int, int, int, int], bound: float) -> NoiseSample:
    """Stack one independent draw per batch element (each with its own c).

    The reported ``c`` is the mean magnitude across the batch; the
    fields carry the per-element draws.
    """
    n = hr_shape[0]
    singles = [draw(rng, (1, *hr_shape[1:]), (1, *lr_shape[1:]), bound) for _ in range(n)]
    v = Tensor(np.concatenate([s.v.data for s in singles], axis=0))
    w = Tensor(np.concatenate([s.w.data for s in singles], axis=0))
    c_mean = float(np.mean([s.c for s in singles])) if singles else 0.0
    return NoiseSample(c=c_mean, v=v, w=w, bound=bound)


def perturb(x: Tensor, y: Tensor, ns: NoiseSample) -> tuple[Tensor, Tensor]:
    """Pure addition x + v, y + w; values may leave [0, 1] by design."""
    if x.shape != ns.v.shape:
        raise ShapeError(f"HR {x.shape} does not match noise field {ns.v.shape}")
    if y.shape != ns.w.shape:
        raise ShapeError(f"LR {y.shape} does not match resized noise {ns.w.shape}")
    return Tensor(x.data + ns.v.data), Tensor(y.data + ns.w.data)


def dequantize(x: Tensor, rng: Rng) -> Tensor:
    """Add uniform noise on [0, 1/256) to 8-bit-quantized values in [0, 1]."""
    return Tensor(x.data + rng.uniform(x.shape) / 256.0)


def inference_condition(hr_shape: tuple[int, int, int, int],
                        scale_factor: int, bound: float = 0.0) -> NoiseSample:
    """The exact-zero noise triple used for all sampling and evaluation."""
    lr_shape = (hr_shape[0], hr_shape[1], hr_shape[2] // scale_factor,
                hr_shape[3] // scale_factor)
    return NoiseSample(c=0.0, v=Tensor(np.zeros(hr_shape)),
                       w=Tensor(np.zeros(lr_shape)), bound=bound)
