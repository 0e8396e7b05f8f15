"""Invertible layers: activation normalization, 1x1 channel mixing,
conditional affine transforms, squeeze and split.

Every layer maps a :class:`FlowState` (activations plus an accumulated
per-sample log-determinant) forward towards the latent and exposes the
exact algebraic inverse. Forward passes build the gradient tape; inverse
passes are expected to run under :func:`~ncsr.tensor.no_grad`.

Scale branches of the conditional transforms are squashed into
``[-scale_bound, scale_bound]`` before exponentiation so that the
Jacobian stays well conditioned throughout training, and every
scale/shift network has a zero-initialized final convolution so each
conditional transform starts as the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .linalg import SquareMatrix, logdet_and_inverse
from .rng import Rng
from .tensor import ShapeError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))

COND_LR = "lr-only"
COND_NOISE = "lr-and-noise"
COND_STD = "lr-and-std"


@dataclass
class FlowState:
    """Activations plus the running per-sample log-determinant."""

    h: Tensor
    logdet: Tensor  # shape (N, 1, 1, 1)

    @classmethod
    def wrap(cls, h: Tensor) -> "FlowState":
        return cls(h, Tensor(np.zeros((h.shape[0], 1, 1, 1))))


@dataclass
class ConditioningBundle:
    """Per-level conditioning: LR encoding plus an optional noise map.

    ``noise`` carries the squeezed injected-noise tensor in
    ``lr-and-noise`` mode and a spatially constant noise-magnitude map in
    ``lr-and-std`` mode; it is None in ``lr-only`` mode. Spatial sizes
    always match the activations they condition.
    """

    u: Tensor
    noise: Tensor | None
    mode: str

    def check_against(self, h: Tensor, layer: str) -> None:
        if self.u.shape[0] != h.shape[0] or self.u.shape[2:] != h.shape[2:]:
            raise ShapeError(
                f"{layer}: conditioning {self.u.shape} misaligned with activations {h.shape}")
        if self.noise is not None and self.noise.shape[2:] != h.shape[2:]:
            raise ShapeError(
                f"{layer}: noise map {self.noise.shape} misaligned with activations {h.shape}")


class Module:
    """Minimal parameter container with deterministic named traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield f"{prefix}{name}", p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            p = self._params[name]
            if p.shape != value.shape:
                raise ShapeError(f"parameter {name}: stored shape {value.shape} != model {p.shape}")
            p.data = np.asarray(value, dtype=np.float64).copy()
            return
        # child keys may themselves contain dots (list registration)
        for key, child in self._children.items():
            if name.startswith(key + "."):
                child.set_parameter(name[len(key) + 1:], value)
                return
        raise KeyError(f"unknown parameter {name!r}")


class Conv2d(Module):
    """Same-padded convolution layer.

    Weights start at zero. ``init_mode == "he"`` layers are filled later
    by the model's structure-keyed initializer; ``"zero"`` layers stay
    null so the transform they feed starts as the identity.
    """

    def __init__(self, c_in: int, c_out: int, k: int = 3, zero_init: bool = False):
        super().__init__()
        self.weight = T.zeros((c_out, c_in, k, k), requires_grad=True)
        self.bias = T.zeros((1, c_out, 1, 1), requires_grad=True)
        self.init_mode = "zero" if zero_init else "he"

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding="same")


class ScaleShiftNet(Module):
    """Shared two-convolution stack emitting a scale and a shift map.

    kernel 3, SiLU between the layers, final layer
    zero-initialized so the transform it feeds starts as the identity.
    The raw scale head is bounded downstream.
    """

    def __init__(self, c_in: int, c_out: int, hidden: int):
        super().__init__()
        self.conv_in = Conv2d(c_in, hidden, 3)
        self.conv_out = Conv2d(hidden, 2 * c_out, 3, zero_init=True)
        self.c_out = c_out

    def __call__(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        hm = T.silu(self.conv_in(feat))
        out = self.conv_out(hm)
        return T.slice_channels(out, 0, self.c_out), T.slice_channels(out, self.c_out, 2 * self.c_out)


def bounded_scale(raw: Tensor, bound: float) -> Tensor:
    """Squash a raw scale map into (-bound, bound) via a scaled sigmoid."""
    return T.shift(T.scale(T.sigmoid(raw), 2.0 * bound), -bound)


def gaussian_logp(z: Tensor, mean: Tensor | None, logstd: Tensor | None) -> Tensor:
    """Per-sample Gaussian log-density, summed over C, H, W -> (N, 1, 1, 1).

    ``mean``/``logstd`` of None stand for the standard normal.
    """
    n, c, h, w = z.shape
    dims = c * h * w
    if mean is None:
        quad = T.sum_per_sample(T.square(z))
        logstd_sum = T.zeros((z.shape[0], 1, 1, 1))
    else:
        centered = T.sub(z, mean)
        quad = T.sum_per_sample(T.square(T.mul(centered, T.exp(T.scale(logstd, -1.0)))))
        logstd_sum = T.sum_per_sample(logstd)
    return T.shift(T.scale(T.add(quad, T.scale(logstd_sum, 2.0)), -0.5), -0.5 * LOG_2PI * dims)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class ActNorm(Module):
    """Per-channel affine h' = s * (h + b) with data-dependent init.

    Until :meth:`initialize_from` runs, s = 1 and b = 0 (the identity).
    """

    def __init__(self, channels: int):
        super().__init__()
        self.scale_param = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        self.shift_param = T.zeros((1, channels, 1, 1), requires_grad=True)
        self.initialized = False

    def initialize_from(self, h: Tensor) -> None:
        """Set s, b so this batch leaves with zero mean and unit variance."""
        mean = h.data.mean(axis=(0, 2, 3), keepdims=True)
        std = h.data.std(axis=(0, 2, 3), keepdims=True)
        std = np.maximum(std, 1e-8)  # constant channels stay finite
        self.shift_param.data = -mean[:1]
        self.scale_param.data = 1.0 / std[:1]
        self.initialized = True

    def _check(self):
        if np.any(self.scale_param.data == 0.0):
            bad = int(np.argmin(np.abs(self.scale_param.data)))
            raise ValueError(f"actnorm scale for channel {bad} is exactly zero")

    def forward(self, state: FlowState) -> FlowState:
        self._check()
        _, _, h, w = state.h.shape
        out = T.mul(T.add(state.h, self.shift_param), self.scale_param)
        ld = T.scale(T.sum_all(T.log_abs(self.scale_param)), float(h * w))
        return FlowState(out, T.add(state.logdet, ld))

    def inverse(self, state: FlowState) -> FlowState:
        self._check()
        _, _, h, w = state.h.shape
        out = T.sub(T.mul(state.h, T.reciprocal(self.scale_param)), self.shift_param)
        ld = T.scale(T.sum_all(T.log_abs(self.scale_param)), float(h * w))
        return FlowState(out, T.sub(state.logdet, ld))


class InvertibleConv1x1(Module):
    """Channel mixing by a learned square matrix; log-det is H*W*log|det W|.

    Initialized to a random rotation (|det| = 1) drawn from the given
    stream, so fresh models start volume-preserving here.
    """

    def __init__(self, rng: Rng, channels: int):
        super().__init__()
        gauss = rng.gaussian((channels, channels), sigma=1.0)
        q, r = np.linalg.qr(gauss)
        q = q * np.sign(np.diag(r))  # unique orthogonal factor
        self.weight = Tensor(q[:, :, None, None], requires_grad=True)

    def forward(self, state: FlowState) -> FlowState:
        _, _, h, w = state.h.shape
        out = T.channel_matmul(state.h, self.weight)
        ld = T.scale(T.matrix_log_abs_det(self.weight), float(h * w))
        return FlowState(out, T.add(state.logdet, ld))

    def inverse(self, state: FlowState) -> FlowState:
        _, _, h, w = state.h.shape
        logdet, inv = logdet_and_inverse(SquareMatrix(self.weight.data[:, :, 0, 0]))
        out = T.channel_matmul(state.h, Tensor(inv.entries[:, :, None, None]))
        ld = T.scalar(logdet * h * w)
        return FlowState(out, T.sub(state.logdet, ld))


class AffineInjector(Module):
    """Elementwise h' = exp(s(u)) * h + b(u), conditioning on u alone.

    Acts on every channel; log-det is the sum of the bounded scale map.
    """

    def __init__(self, channels: int, cond_channels: int,
                 hidden: int, scale_bound: float = 2.0):
        super().__init__()
        self.net = ScaleShiftNet(cond_channels, channels, hidden)
        self.scale_bound = scale_bound

    def _maps(self, cond: ConditioningBundle) -> tuple[Tensor, Tensor]:
        raw_s, b = self.net(cond.u)
        return bounded_scale(raw_s, self.scale_bound), b

    def forward(self, state: FlowState, cond: ConditioningBundle) -> FlowState:
        cond.check_against(state.h, "affine_injector")
        s, b = self._maps(cond)
        out = T.add(T.mul(state.h, T.exp(s)), b)
        return FlowState(out, T.add(state.logdet, T.sum_per_sample(s)))

    def inverse(self, state: FlowState, cond: ConditioningBundle) -> FlowState:
        cond.check_against(state.h, "affine_injector")
        s, b = self._maps(cond)
        out = T.mul(T.sub(state.h, b), T.exp(T.scale(s, -1.0)))
        return FlowState(out, T.sub(state.logdet, T.sum_per_sample(s)))


class AffineCoupling(Module):
    """Conditional affine coupling over a fixed channel partition.

    The first ceil(C/2) channels pass through and drive, together with
    the conditioning (and the noise map when ``use_noise``), a
    scale/shift of the remaining channels. With ``use_noise`` this is the
    noise-conditional variant; its conditioning input is the channel
    concatenation (passthrough half, u, noise map).
    """

    def __init__(self, channels: int, cond_channels: int, noise_channels: int,
                 hidden: int, use_noise: bool = False, scale_bound: float = 2.0):
        super().__init__()
        if channels < 2:
            raise ShapeError(f"affine coupling needs >= 2 channels, got {channels}")
        self.c_a = (channels + 1) // 2
        self.c_b = channels - self.c_a
        self.use_noise = use_noise
        self.scale_bound = scale_bound
        feat_ch = self.c_a + cond_channels + (noise_channels if use_noise else 0)
        self.net = ScaleShiftNet(feat_ch, self.c_b, hidden)

    def _maps(self, part_a: Tensor, cond: ConditioningBundle) -> tuple[Tensor, Tensor]:
        feats = [part_a, cond.u]
        if self.use_noise:
            if cond.noise is None:
                raise ValueError("noise-conditional coupling called without a noise map")
            feats.append(cond.noise)
        raw_s, b = self.net(T.concat_channels(feats))
        return bounded_scale(raw_s, self.scale_bound), b

    def forward(self, state: FlowState, cond: ConditioningBundle) -> FlowState:
        cond.check_against(state.h, "affine_coupling")
        a = T.slice_channels(state.h, 0, self.c_a)
        b_half = T.slice_channels(state.h, self.c_a, self.c_a + self.c_b)
        s, t = self._maps(a, cond)
        b_out = T.add(T.mul(b_half, T.exp(s)), t)
        out = T.concat_channels([a, b_out])
        return FlowState(out, T.add(state.logdet, T.sum_per_sample(s)))

    def inverse(self, state: FlowState, cond: ConditioningBundle) -> FlowState:
        cond.check_against(state.h, "affine_coupling")
        a = T.slice_channels(state.h, 0, self.c_a)
        b_half = T.slice_channels(state.h, self.c_a, self.c_a + self.c_b)
        s, t = self._maps(a, cond)
        b_out = T.mul(T.sub(b_half, t), T.exp(T.scale(s, -1.0)))
        out = T.concat_channels([a, b_out])
        return FlowState(out, T.sub(state.logdet, T.sum_per_sample(s)))


class Squeeze(Module):
    """Space-to-channel rearrangement; volume preserving and exact."""

    def forward(self, state: FlowState) -> FlowState:
        return FlowState(T.space_to_channel(state.h), state.logdet)

    def inverse(self, state: FlowState) -> FlowState:
        return FlowState(T.channel_to_space(state.h), state.logdet)


class Split(Module):
    """Factor out the second channel half under a learned Gaussian prior.

    The retained half drives a zero-initialized convolution producing the
    prior mean and log-std of the removed half (so the prior starts as
    the standard normal). With ``conditional=False`` the prior is pinned
    to the standard normal regardless of parameters.
    """

    def __init__(self, channels: int, conditional: bool = True):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"split needs an even channel count, got {channels}")
        self.half = channels // 2
        self.conditional = conditional
        self.prior_net = Conv2d(self.half, channels, 3, zero_init=True)

    def _prior(self, kept: Tensor) -> tuple[Tensor | None, Tensor | None]:
        if not self.conditional:
            return None, None
        out = self.prior_net(kept)
        return (T.slice_channels(out, 0, self.half),
                T.slice_channels(out, self.half, 2 * self.half))

    def forward(self, state: FlowState) -> tuple[FlowState, Tensor, Tensor]:
        """Returns (reduced state, removed latent, per-sample prior log-density)."""
        kept = T.slice_channels(state.h, 0, self.half)
        removed = T.slice_channels(state.h, self.half, 2 * self.half)
        mean, logstd = self._prior(kept)
        logp = gaussian_logp(removed, mean, logstd)
        return FlowState(kept, state.logdet), removed, logp

    def inverse(self, state: FlowState, z: Tensor | None = None,
                temperature: float = 1.0, rng: Rng | None = None) -> FlowState:
        """Re-attach a recorded latent, or draw one from the prior.

        Drawn latents use mean + std * temperature * eps; temperature 0
        reproduces the prior mean exactly.
        """
        kept = state.h
        mean, logstd = self._prior(kept)
        if z is None:
            shape = (kept.shape[0], self.half, kept.shape[2], kept.shape[3])
            if temperature == 0.0:
                eps = np.zeros(shape)
            else:
                if rng is None:
                    raise ValueError("split inverse with temperature > 0 needs an rng")
                eps = rng.gaussian(shape, sigma=1.0) * temperature
            if mean is None:
                z = Tensor(eps)
            else:
                z = T.add(mean, T.mul(T.exp(logstd), Tensor(eps)))
        return FlowState(T.concat_channels([kept, z]), state.logdet)
