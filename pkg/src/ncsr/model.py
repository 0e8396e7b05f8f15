"""Full model assembly: LR encoder, multi-level flow, likelihood, sampling.

The flow runs image -> latent through repeated levels of
squeeze -> transition (actnorm + 1x1) -> K conditional flow steps ->
split, with each conditional flow step being the five-part block
actnorm, 1x1 mixing, affine injector, optional noise-conditional
coupling, LR-conditional coupling. Levels are indexed two ways: forward
level 1 touches image space first; inference order counts from the
latent side, so inference block 1 is forward level L. The noise
conditional layer lives in the inference-order blocks listed in
``ncl_blocks`` and is forbidden (strict mode) in the last inference
block so that generation always ends in a noise-free block.
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .flow_layers import (COND_LR, COND_NOISE, COND_STD, ActNorm, AffineCoupling,
                          AffineInjector, ConditioningBundle, Conv2d, FlowState,
                          InvertibleConv1x1, Module, Split, Squeeze, gaussian_logp)
from .rng import Rng
from .tensor import ShapeError, Tensor, no_grad

LN2 = float(np.log(2.0))

# Fixed key for structure-dependent initialization of the scale/shift and
# encoder convolutions: their weights depend only on the parameter path,
# never on the build seed. The build seed then only controls the 1x1
# channel-mixing rotations, so two builds with different seeds share
# everything else (and always share the parameter-table layout).
STRUCTURED_INIT_KEY = 0x6E637372

VARIANTS = ("noise", "std", "none")


class ConfigError(ValueError):
    """A configuration violates a structural rule."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``ncl_blocks`` lists inference-order block indices (1 = deepest /
    first generated); None resolves to {1, 2} clipped away from the
    final inference block. ``noise_bound`` is the upper limit of the
    uniform noise-magnitude draw during training.
    """

    scale_factor: int = 4
    levels: int = 3
    flow_steps: int = 4
    ncl_blocks: tuple[int, ...] | None = None
    conditioning: str = "noise"
    encoder_blocks: int = 2
    encoder_width: int = 32
    coupling_hidden: int = 32
    noise_bound: float = 0.1
    temperature: float = 0.9
    split_prior: str = "conditional"
    scale_bound: float = 2.0
    strict_noise_free: bool = True

    def resolved_ncl_blocks(self) -> frozenset[int]:
        if self.ncl_blocks is None:
            return frozenset(i for i in (1, 2) if i <= self.levels - 1)
        return frozenset(self.ncl_blocks)

    def validate(self) -> None:
        if self.scale_factor not in (2, 4, 8):
            raise ConfigError(f"scale_factor must be 2, 4 or 8, got {self.scale_factor}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.flow_steps < 1:
            raise ConfigError(f"flow_steps must be >= 1, got {self.flow_steps}")
        if self.conditioning not in VARIANTS:
            raise ConfigError(f"conditioning must be one of {VARIANTS}, got {self.conditioning!r}")
        if self.split_prior not in ("conditional", "standard"):
            raise ConfigError(f"split_prior must be conditional or standard, got {self.split_prior!r}")
        if self.noise_bound < 0:
            raise ConfigError(f"noise_bound must be >= 0, got {self.noise_bound}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if min(self.encoder_blocks, self.encoder_width, self.coupling_hidden) < 1:
            raise ConfigError("encoder_blocks, encoder_width and coupling_hidden must be >= 1")
        blocks = self.resolved_ncl_blocks()
        bad = [i for i in blocks if not 1 <= i <= self.levels]
        if bad:
            raise ConfigError(f"ncl_blocks {sorted(bad)} outside inference blocks 1..{self.levels}")
        if self.conditioning != "none" and self.levels in blocks:
            msg = (f"noise-free block rule: inference block {self.levels} is the last "
                   f"block before image space and must not carry a noise conditional layer")
            if self.strict_noise_free:
                raise ConfigError(msg)
            warnings.warn(msg, stacklevel=2)

    def validate_patch(self, patch_hr: int) -> None:
        div = self.scale_factor * 2**self.levels
        if patch_hr % div:
            raise ConfigError(
                f"HR patch side {patch_hr} must be divisible by scale * 2^levels = {div}")

    def level_uses_ncl(self, forward_level: int) -> bool:
        if self.conditioning == "none":
            return False
        inference_index = self.levels - forward_level + 1
        return inference_index in self.resolved_ncl_blocks()

    # -- flat serialization (checkpoints) --------------------------------

    def to_text(self) -> str:
        ncl = "auto" if self.ncl_blocks is None else ",".join(map(str, self.ncl_blocks))
        lines = [
            f"scale_factor = {self.scale_factor}",
            f"levels = {self.levels}",
            f"flow_steps = {self.flow_steps}",
            f"ncl_blocks = {ncl}",
            f"conditioning = {self.conditioning}",
            f"encoder_blocks = {self.encoder_blocks}",
            f"encoder_width = {self.encoder_width}",
            f"coupling_hidden = {self.coupling_hidden}",
            f"noise_bound = {self.noise_bound!r}",
            f"temperature = {self.temperature!r}",
            f"split_prior = {self.split_prior}",
            f"scale_bound = {self.scale_bound!r}",
            f"strict_noise_free = {int(self.strict_noise_free)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
        ncl: tuple[int, ...] | None
        if kv["ncl_blocks"] == "auto":
            ncl = None
        elif kv["ncl_blocks"] == "":
            ncl = ()
        else:
            ncl = tuple(int(v) for v in kv["ncl_blocks"].split(","))
        return cls(
            scale_factor=int(kv["scale_factor"]),
            levels=int(kv["levels"]),
            flow_steps=int(kv["flow_steps"]),
            ncl_blocks=ncl,
            conditioning=kv["conditioning"],
            encoder_blocks=int(kv["encoder_blocks"]),
            encoder_width=int(kv["encoder_width"]),
            coupling_hidden=int(kv["coupling_hidden"]),
            noise_bound=float(kv["noise_bound"]),
            temperature=float(kv["temperature"]),
            split_prior=kv["split_prior"],
            scale_bound=float(kv["scale_bound"]),
            strict_noise_free=bool(int(kv["strict_noise_free"])),
        )


def apply_structured_init(module: Module, prefix: str = "") -> None:
    """Fill every he-init convolution from a path-keyed stream."""
    base = Rng(STRUCTURED_INIT_KEY)
    for name, mod in module.named_modules(prefix):
        if isinstance(mod, Conv2d) and mod.init_mode == "he":
            c_out, c_in, kh, kw = mod.weight.shape
            sigma = float(np.sqrt(2.0 / (c_in * kh * kw)))
            mod.weight.data = base.child(f"{name}.weight").gaussian(mod.weight.shape, sigma)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

class ResidualDenseBlock(Module):
    """Small dense block: two growth convolutions plus a fused residual."""

    def __init__(self, width: int, growth: int):
        super().__init__()
        self.conv1 = Conv2d(width, growth)
        self.conv2 = Conv2d(width + growth, growth)
        self.conv3 = Conv2d(width + 2 * growth, width)

    def __call__(self, x: Tensor) -> Tensor:
        d1 = T.silu(self.conv1(x))
        d2 = T.silu(self.conv2(T.concat_channels([x, d1])))
        out = self.conv3(T.concat_channels([x, d1, d2]))
        return T.add(x, T.scale(out, 0.2))


class LREncoder(Module):
    """Residual-dense trunk at LR resolution, fanned into a per-level pyramid.

    Levels above the LR resolution are reached by nearest-neighbor
    upsampling plus a convolution; levels below by a convolution plus
    stride-2 decimation. Each flow level gets its own projection head.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        w = config.encoder_width
        self.depth_lr = int(np.log2(config.scale_factor))
        self.levels = config.levels
        self.stem = Conv2d(3, w)
        self.blocks = [ResidualDenseBlock(w, max(w // 2, 4)) for _ in range(config.encoder_blocks)]
        self.trunk = Conv2d(w, w)
        n_up = max(0, self.depth_lr - 1)
        n_down = max(0, config.levels - self.depth_lr)
        self.up_convs = [Conv2d(w, w) for _ in range(n_up)]
        self.down_convs = [Conv2d(w, w) for _ in range(n_down)]
        self.heads = [Conv2d(w, w) for _ in range(config.levels)]

    def __call__(self, y: Tensor) -> list[Tensor]:
        if y.shape[1] != 3:
            raise ShapeError(f"LR encoder expects 3 input channels, got shape {y.shape}")
        feat = T.silu(self.stem(y))
        skip = feat
        for block in self.blocks:
            feat = block(feat)
        feat = T.add(self.trunk(feat), skip)

        bank = {0: feat}  # offset from LR resolution in octaves (negative = larger)
        cur = feat
        for k, conv in enumerate(self.up_convs, start=1):
            cur = T.silu(conv(T.nearest_upsample2(cur)))
            bank[-k] = cur
        cur = feat
        for k, conv in enumerate(self.down_convs, start=1):
            cur = T.subsample2(T.silu(conv(cur)))
            bank[k] = cur

        pyramid = []
        for lvl in range(1, self.levels + 1):
            pyramid.append(self.heads[lvl - 1](bank[lvl - self.depth_lr]))
        return pyramid


# ---------------------------------------------------------------------------
# flow blocks
# ---------------------------------------------------------------------------

class Transition(Module):
    """Unconditioned actnorm + 1x1 mixing preceding the conditional steps."""

    def __init__(self, rng: Rng, channels: int):
        super().__init__()
        self.norm = ActNorm(channels)
        self.mix = InvertibleConv1x1(rng, channels)

    def forward(self, state: FlowState, init: bool = False) -> FlowState:
        if init and not self.norm.initialized:
            self.norm.initialize_from(state.h)
        return self.mix.forward(self.norm.forward(state))

    def inverse(self, state: FlowState) -> FlowState:
        return self.norm.inverse(self.mix.inverse(state))


class FlowStep(Module):
    """The five-part conditional block (noise coupling present on NCL levels)."""

    def __init__(self, rng: Rng, channels: int, cond_channels: int, noise_channels: int,
                 use_ncl: bool, hidden: int, scale_bound: float):
        super().__init__()
        self.norm = ActNorm(channels)
        self.mix = InvertibleConv1x1(rng, channels)
        self.inject = AffineInjector(channels, cond_channels, hidden, scale_bound)
        if use_ncl:
            self.noise_couple = AffineCoupling(channels, cond_channels, noise_channels,
                                               hidden, use_noise=True, scale_bound=scale_bound)
        else:
            self.noise_couple = None
        self.couple = AffineCoupling(channels, cond_channels, 0, hidden,
                                     use_noise=False, scale_bound=scale_bound)

    def forward(self, state: FlowState, cond: ConditioningBundle,
                init: bool = False) -> FlowState:
        if init and not self.norm.initialized:
            self.norm.initialize_from(state.h)
        state = self.norm.forward(state)
        state = self.mix.forward(state)
        state = self.inject.forward(state, cond)
        if self.noise_couple is not None:
            state = self.noise_couple.forward(state, cond)
        return self.couple.forward(state, cond)

    def inverse(self, state: FlowState, cond: ConditioningBundle) -> FlowState:
        state = self.couple.inverse(state, cond)
        if self.noise_couple is not None:
            state = self.noise_couple.inverse(state, cond)
        state = self.inject.inverse(state, cond)
        state = self.mix.inverse(state)
        return self.norm.inverse(state)


class FlowLevel(Module):
    """One pyramid level: squeeze, transition, K flow steps, optional split."""

    def __init__(self, rng: Rng, channels: int, n_steps: int, cond_channels: int,
                 noise_channels: int, use_ncl: bool, hidden: int, scale_bound: float,
                 has_split: bool, conditional_prior: bool):
        super().__init__()
        self.squeeze = Squeeze()
        self.transition = Transition(rng, channels)
        self.steps = [FlowStep(rng, channels, cond_channels, noise_channels,
                               use_ncl, hidden, scale_bound) for _ in range(n_steps)]
        self.split = Split(channels, conditional=conditional_prior) if has_split else None


class NCSRModel(Module):
    """Conditional flow between HR images and Gaussian latents.

    The forward direction maps an HR image (given its LR encoding and
    the injected-noise conditioning) to latents with an exact
    log-likelihood; the inverse direction generates HR images from
    temperature-scaled latent draws with the noise conditioning pinned
    to zero.
    """

    def __init__(self, config: ModelConfig, rng: Rng):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = LREncoder(config)

        levels = []
        channels = 3
        for fwd in range(1, config.levels + 1):
            channels *= 4
            noise_ch = 3 * 4**fwd if config.conditioning == "noise" else 1
            has_split = fwd < config.levels
            levels.append(FlowLevel(
                rng, channels, config.flow_steps, config.encoder_width, noise_ch,
                config.level_uses_ncl(fwd), config.coupling_hidden, config.scale_bound,
                has_split, config.split_prior == "conditional"))
            if has_split:
                channels //= 2
        self.levels = levels
        self.final_channels = channels
        apply_structured_init(self)

    # -- conditioning -----------------------------------------------------

    def encode_lr(self, y: Tensor) -> list[Tensor]:
        """Per-level LR encodings, spatially aligned with the flow levels."""
        return self.encoder(y)

    def _noise_maps(self, v: Tensor | None, x_shape: tuple[int, int, int, int]) -> list[Tensor | None]:
        mode = self.config.conditioning
        if mode == "none":
            return [None] * self.config.levels
        if v is None:
            v = Tensor(np.zeros(x_shape))
        if v.shape != x_shape:
            raise ShapeError(f"noise tensor {v.shape} does not match HR shape {x_shape}")
        maps: list[Tensor | None] = []
        if mode == "noise":
            cur = Tensor(v.data)
            for _ in range(self.config.levels):
                cur = T.space_to_channel(cur)
                maps.append(cur)
        else:  # std: spatially constant per-sample magnitude of the injected noise
            mags = v.data.reshape(v.shape[0], -1).std(axis=1)
            n, _, h, w = x_shape
            for lvl in range(1, self.config.levels + 1):
                shape = (n, 1, h >> lvl, w >> lvl)
                maps.append(Tensor(np.broadcast_to(mags[:, None, None, None], shape).copy()))
        return maps

    def _bundles(self, y: Tensor, v: Tensor | None,
                 x_shape: tuple[int, int, int, int]) -> list[ConditioningBundle]:
        mode = {"noise": COND_NOISE, "std": COND_STD, "none": COND_LR}[self.config.conditioning]
        encodings = self.encode_lr(y)
        noise_maps = self._noise_maps(v, x_shape)
        return [ConditioningBundle(u, nm, mode) for u, nm in zip(encodings, noise_maps)]

    def _check_shapes(self, x: Tensor, y: Tensor) -> None:
        n, c, h, w = x.shape
        s = self.config.scale_factor
        div = s * 2**self.config.levels
        if c != 3:
            raise ShapeError(f"HR input must have 3 channels, got shape {x.shape}")
        if h % div or w % div:
            raise ShapeError(f"HR size {h}x{w} must be divisible by scale * 2^levels = {div}")
        if y.shape != (n, 3, h // s, w // s):
            raise ShapeError(f"LR shape {y.shape} does not match HR {x.shape} at scale {s}")

    # -- likelihood -------------------------------------------------------

    def nll(self, x: Tensor, y: Tensor, v: Tensor | None = None,
            actnorm_init: bool = False, collect_latents: bool = False):
        """Negative log-likelihood of HR ``x`` given LR ``y`` and noise ``v``.

        Returns ``(loss, info)`` where loss is the batch-mean bits per
        dimension as a scalar tensor and info carries per-sample values
        (bits_per_dim, nll_nats, logdet, logp) plus latents on request.
        """
        self._check_shapes(x, y)
        bundles = self._bundles(y, v, x.shape)
        n, _, h, w = x.shape
        dims = 3 * h * w

        state = FlowState.wrap(x)
        logp = Tensor(np.zeros((n, 1, 1, 1)))
        latents: list[Tensor] = []
        for idx, level in enumerate(self.levels, start=1):
            cond = bundles[idx - 1]
            state = level.squeeze.forward(state)
            state = level.transition.forward(state, init=actnorm_init)
            state.h.assert_finite(f"level {idx} transition output")
            for step_idx, step in enumerate(level.steps, start=1):
                state = step.forward(state, cond, init=actnorm_init)
                state.h.assert_finite(f"level {idx} flow step {step_idx} output")
            if level.split is not None:
                state, z, lp = level.split.forward(state)
                logp = T.add(logp, lp)
                latents.append(z)
        logp = T.add(logp, gaussian_logp(state.h, None, None))
        latents.append(state.h)

        nats = T.scale(T.add(logp, state.logdet), -1.0)       # (N,1,1,1)
        bits = T.scale(nats, 1.0 / (LN2 * dims))
        loss = T.mean_all(bits)
        info = {
            "bits_per_dim": bits.data.reshape(n).copy(),
            "nll_nats": nats.data.reshape(n).copy(),
            "logdet": state.logdet.data.reshape(n).copy(),
            "logp": logp.data.reshape(n).copy(),
        }
        if collect_latents:
            info["latents"] = latents
        return loss, info

    def initialize_actnorms(self, x: Tensor, y: Tensor, v: Tensor | None = None) -> None:
        """Data-dependent actnorm init from one batch (idempotent)."""
        if all(m.initialized for _n, m in self.named_modules() if isinstance(m, ActNorm)):
            return
        with no_grad():
            self.nll(x, y, v, actnorm_init=True)

    # -- generation ---------------------------------------------------------

    def _inverse(self, z_final: Tensor, bundles: Sequence[ConditioningBundle],
                 split_latents: Sequence[Tensor] | None = None,
                 temperature: float = 0.0, rng: Rng | None = None) -> tuple[Tensor, list[Tensor]]:
        """Run latent -> image. Split latents are taken from
        ``split_latents`` when given, otherwise drawn from the prior at
        the given temperature. Returns (x, latents in forward order)."""
        state = FlowState.wrap(z_final)
        drawn: list[Tensor] = [z_final]
        for idx in range(len(self.levels), 0, -1):
            level = self.levels[idx - 1]
            cond = bundles[idx - 1]
            if level.split is not None:
                z = split_latents[idx - 1] if split_latents is not None else None
                state = level.split.inverse(state, z=z, temperature=temperature, rng=rng)
                kept = state.h.shape[1] // 2
                drawn.insert(0, T.slice_channels(state.h, kept, state.h.shape[1]))
            for step in reversed(level.steps):
                state = step.inverse(state, cond)
            state = level.transition.inverse(state)
            state = level.squeeze.inverse(state)
        return state.h, drawn

    def latent_shape(self, hr_hw: tuple[int, int], batch: int = 1) -> tuple[int, int, int, int]:
        h, w = hr_hw
        depth = 2**self.config.levels
        return (batch, self.final_channels, h // depth, w // depth)

    def sample(self, y: Tensor, temperature: float | None = None, rng: Rng | None = None,
               n_samples: int = 1, clamp: bool = True,
               collect_latents: bool = False) -> list[Tensor] | tuple[list[Tensor], list[list[Tensor]]]:
        """Draw HR samples for LR input ``y`` with zero noise conditioning.

        Latents are N(0, temperature^2) at every slot; temperature 0
        yields the deterministic mode decode. Outputs are clamped to
        [0, 1] unless ``clamp=False`` (diagnostics).
        """
        if temperature is None:
            temperature = self.config.temperature
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        if temperature > 0 and rng is None:
            raise ValueError("sampling with temperature > 0 requires an rng")
        n, c, hy, wy = y.shape
        if c != 3:
            raise ShapeError(f"LR input must have 3 channels, got shape {y.shape}")
        s = self.config.scale_factor
        hr_shape = (n, 3, hy * s, wy * s)

        with no_grad():
            bundles = self._bundles(y, None, hr_shape)
            outs, all_latents = [], []
            for _ in range(n_samples):
                z_shape = self.latent_shape((hr_shape[2], hr_shape[3]), batch=n)
                if temperature == 0.0:
                    z_final = Tensor(np.zeros(z_shape))
                else:
                    z_final = Tensor(rng.gaussian(z_shape, 1.0) * temperature)
                x, drawn = self._inverse(z_final, bundles, None, temperature, rng)
                x.assert_finite("sampled image")
                if clamp:
                    x = Tensor(np.clip(x.data, 0.0, 1.0))
                outs.append(x)
                all_latents.append(drawn)
        if collect_latents:
            return outs, all_latents
        return outs

    def inverse_from_latents(self, latents: Sequence[Tensor], y: Tensor,
                             v: Tensor | None = None) -> Tensor:
        """Exact inverse of :meth:`nll`'s forward pass at conditioning (y, v)."""
        z_final = latents[-1]
        n = z_final.shape[0]
        s = self.config.scale_factor
        hr_shape = (n, 3, y.shape[2] * s, y.shape[3] * s)
        with no_grad():
            bundles = self._bundles(y, v, hr_shape)
            x, _ = self._inverse(z_final, bundles, split_latents=list(latents), temperature=0.0)
        return x

    # -- parameter table ----------------------------------------------------

    def parameter_table(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_parameter_table(self, table: dict[str, np.ndarray]) -> None:
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(table))
        extra = sorted(set(table) - set(mine))
        if missing or extra:
            raise ConfigError(f"parameter table mismatch: missing {missing[:3]}, extra {extra[:3]}")
        for name, value in table.items():
            self.set_parameter(name, value)

    def mark_actnorms_initialized(self) -> None:
        for _name, mod in self.named_modules():
            if isinstance(mod, ActNorm):
                mod.initialized = True

    def zero_grad(self) -> None:
        for _name, p in self.named_parameters():
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NCSR"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: NCSRModel, step: int = 0,
                    rng_state: tuple[int, int] = (0, 0)) -> None:
    """Little-endian binary checkpoint: header, config text, named tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", step))
    buf.write(struct.pack("<QQ", rng_state[0], rng_state[1]))
    any_init = any(m.initialized for _n, m in model.named_modules() if isinstance(m, ActNorm))
    buf.write(struct.pack("<B", 1 if any_init else 0))
    cfg = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    table = model.parameter_table()
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", 0))  # dtype tag 0 = float64
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[NCSRModel, int, tuple[int, int]]:
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)
    if view.read(4) != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", view.read(4))
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (step,) = struct.unpack("<Q", view.read(8))
    rng_key, rng_counter = struct.unpack("<QQ", view.read(16))
    (actnorm_init,) = struct.unpack("<B", view.read(1))
    (cfg_len,) = struct.unpack("<I", view.read(4))
    config = ModelConfig.from_text(view.read(cfg_len).decode("utf-8"))
    model = NCSRModel(config, Rng(0))
    (n_params,) = struct.unpack("<I", view.read(4))
    table = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", view.read(2))
        name = view.read(name_len).decode("utf-8")
        (dtype_tag,) = struct.unpack("<B", view.read(1))
        if dtype_tag != 0:
            raise ConfigError(f"{path}: unknown dtype tag {dtype_tag} for {name}")
        (ndim,) = struct.unpack("<B", view.read(1))
        shape = struct.unpack(f"<{ndim}I", view.read(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view.read(8 * count), dtype="<f8").reshape(shape)
        table[name] = arr.astype(np.float64)
    model.load_parameter_table(table)
    if actnorm_init:
        model.mark_actnorms_initialized()
    return model, step, (rng_key, rng_counter)
