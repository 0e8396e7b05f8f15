"""Likelihood training loop: batching, augmentation, Adam, LR schedule.

Each step draws random HR crops, augments them (90-degree rotations and
horizontal flips), derives LR inputs from the augmented crops by bicubic
downsampling, dequantizes the HR targets, applies the configured noise
protocol, and takes one clipped Adam step on the bits-per-dimension
objective. The learning rate is piecewise constant and halves exactly at
the configured milestones.

``noise_mode`` selects the training protocol stage: "none" trains on
clean pairs, "hr_only" perturbs only the HR target (the misconditioned
variant: the LR input no longer matches its degraded HR), and "matched"
perturbs both sides with the same underlying noise field.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import noise
from .data import ImageRecord
from .model import ConfigError, NCSRModel, save_checkpoint
from .resample import bicubic_resize
from .rng import Rng
from .tensor import NonFiniteError, Tensor, backward

NOISE_MODES = ("none", "hr_only", "matched")


class TrainingDiverged(RuntimeError):
    """Loss was non-finite on consecutive steps."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    patch_hr: int = 64
    lr_init: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    halve_at: tuple[int, ...] = (1100, 1650)
    total_steps: int = 2000
    grad_clip: float = 10.0
    noise_mode: str = "matched"
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1
    probe_every: int = 0  # 0 disables the fixed-batch convergence probe

    def validate(self) -> None:
        if self.batch_size < 1 or self.patch_hr < 4 or self.total_steps < 1:
            raise ConfigError("batch_size, patch_hr and total_steps must be positive")
        if list(self.halve_at) != sorted(set(self.halve_at)):
            raise ConfigError(f"halve_at must be strictly increasing, got {self.halve_at}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.lr_init <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr_init and grad_clip must be positive")


@dataclass
class TrainRecord:
    step: int
    bits_per_dim: float
    lr: float
    grad_norm: float
    seconds: float
    probe_bits_per_dim: float | None = None  # fixed-batch convergence probe

    def line(self) -> str:
        return (f"{self.step}\t{self.bits_per_dim:.6f}\t{self.lr:.8g}"
                f"\t{self.grad_norm:.6f}\t{self.seconds:.4f}")


def learning_rate(tc: TrainConfig, step: int) -> float:
    """Piecewise-constant schedule; exactly lr_init / 2^k after k milestones."""
    halvings = sum(1 for m in tc.halve_at if m <= step)
    return tc.lr_init * 0.5**halvings


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def usable_corpus(corpus: list[ImageRecord], patch_hr: int) -> list[ImageRecord]:
    """Drop images too small to crop from; error if nothing remains."""
    usable = []
    for rec in corpus:
        if rec.hr.shape[2] >= patch_hr and rec.hr.shape[3] >= patch_hr:
            usable.append(rec)
        else:
            warnings.warn(f"image {rec.id} smaller than patch {patch_hr}, skipped", stacklevel=2)
    if not usable:
        raise ValueError(f"corpus has no image at least {patch_hr}x{patch_hr}")
    return usable


def augment_patch(patch: np.ndarray, rot_quarters: int, flip: bool) -> np.ndarray:
    """Rotate by 90-degree multiples and optionally mirror horizontally."""
    out = np.rot90(patch, rot_quarters, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def make_batch(corpus: list[ImageRecord], rng: Rng, tc: TrainConfig,
               scale: int) -> tuple[Tensor, Tensor]:
    """Random augmented HR crops plus bicubic-derived LR inputs in [0, 1]."""
    if not corpus:
        raise ValueError("empty corpus")
    p = tc.patch_hr
    crops = []
    for _ in range(tc.batch_size):
        rec = corpus[rng.integers(0, len(corpus))]
        _, _, h, w = rec.hr.shape
        top = rng.integers(0, h - p + 1)
        left = rng.integers(0, w - p + 1)
        patch = rec.hr.data[0, :, top:top + p, left:left + p]
        patch = augment_patch(patch, rng.integers(0, 4), rng.uniform() < 0.5)
        crops.append(patch)
    x = Tensor(np.stack(crops))
    y = bicubic_resize(x, 1.0 / scale)
    return x, y


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, epsilon: float = 1e-8,
              grad_clip: float = 10.0) -> tuple[float, bool]:
    """One bias-corrected Adam update with global-norm gradient clipping.

    Returns (pre-clip gradient norm, applied). Non-finite gradients skip
    the update entirely and report applied=False.
    """
    norm = global_grad_norm(params)
    if not np.isfinite(norm):
        return norm, False
    clip_factor = min(1.0, grad_clip / (norm + 1e-12))
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad * clip_factor
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.m[name] = m
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step_dir = (m / bc1) / (np.sqrt(v / bc2) + epsilon)
        p.data = p.data - lr * step_dir
    return norm, True


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _prepare_batch(corpus, tc: TrainConfig, model: NCSRModel,
                   rng_batch: Rng, rng_dequant: Rng, rng_noise: Rng):
    scale = model.config.scale_factor
    x, y = make_batch(corpus, rng_batch, tc, scale)
    x = noise.dequantize(x, rng_dequant)
    if tc.noise_mode == "none":
        ns = noise.inference_condition(x.shape, scale, model.config.noise_bound)
        return x, y, ns.v
    ns = noise.draw_batch(rng_noise, x.shape, y.shape, model.config.noise_bound)
    x_plus, y_plus = noise.perturb(x, y, ns)
    if tc.noise_mode == "hr_only":
        return x_plus, y, ns.v  # LR left clean: the misconditioned stage
    return x_plus, y_plus, ns.v


def train(model: NCSRModel, corpus: list[ImageRecord], tc: TrainConfig,
          out_dir: str | Path | None = None,
          log_fn=None) -> list[TrainRecord]:
    """Run the full schedule; the model is updated in place.

    Writes periodic and final checkpoints plus a tab-separated log when
    ``out_dir`` is given. Aborts with :class:`TrainingDiverged` after two
    consecutive non-finite losses.
    """
    tc.validate()
    model.config.validate_patch(tc.patch_hr)
    corpus = usable_corpus(corpus, tc.patch_hr)

    root = Rng(tc.seed)
    rng_batch = root.child("batches")
    rng_dequant = root.child("dequant")
    rng_noise = root.child("noise")
    params = dict(model.named_parameters())
    state = AdamState()
    records: list[TrainRecord] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []
    nonfinite_streak = 0

    for step in range(1, tc.total_steps + 1):
        t0 = time.perf_counter()
        x, y, v = _prepare_batch(corpus, tc, model, rng_batch, rng_dequant, rng_noise)
        if step == 1:
            model.initialize_actnorms(x, y, v)
        lr = learning_rate(tc, step)
        try:
            loss, _info = model.nll(x, y, v)
        except NonFiniteError as exc:
            nonfinite_streak += 1
            if log_fn:
                log_fn(f"step {step}: non-finite loss skipped ({exc})")
            if nonfinite_streak >= 2:
                raise TrainingDiverged(f"non-finite loss on consecutive steps: {exc}") from exc
            continue
        bpd = loss.item()
        if not np.isfinite(bpd):
            nonfinite_streak += 1
            if log_fn:
                log_fn(f"step {step}: non-finite loss skipped")
            if nonfinite_streak >= 2:
                raise TrainingDiverged("non-finite loss on consecutive steps")
            continue
        nonfinite_streak = 0
        model.zero_grad()
        backward(loss)
        norm, applied = adam_step(params, state, lr, tc.beta1, tc.beta2,
                                  tc.epsilon, tc.grad_clip)
        if not applied and log_fn:
            log_fn(f"step {step}: non-finite gradients, update skipped")
        rec = TrainRecord(step=step, bits_per_dim=bpd, lr=lr, grad_norm=norm,
                          seconds=time.perf_counter() - t0)
        records.append(rec)
        log_lines.append(rec.line())
        if log_fn and step % tc.log_every == 0:
            log_fn(f"step {step}/{tc.total_steps}  bpd {bpd:.4f}  lr {lr:.2e}  "
                   f"|g| {norm:.3f}")
        if out_path is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            save_checkpoint(out_path / f"step{step:07d}.ckpt", model, step,
                            rng_batch.state())

    if out_path is not None:
        save_checkpoint(out_path / "final.ckpt", model, tc.total_steps, rng_batch.state())
        (out_path / "train.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return records
