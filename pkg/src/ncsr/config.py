"""Flat ``key = value`` run configuration.

One auditable text format drives every command. Sections are dotted
prefixes (``model.levels = 3``); unknown keys are rejected with their
line number, every key has a documented default, and the original text
is echoed verbatim into the run directory so a run can always be
re-parsed into the identical configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticCorpusSpec, read_manifest, synth_corpus
from .model import ConfigError, ModelConfig
from .train import TrainConfig


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/run"
    data_source: str = "synth"          # synth | manifest
    data_corpus: str = ""               # manifest path when data_source = manifest
    synth_images: int = 16
    synth_size: int = 64
    synth_seed: int = 0
    eval_samples: int = 10
    eval_temperature: float | None = None  # defaults to the model temperature
    eval_score: str = "squared"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    raw_text: str = ""

    def resolved_eval_temperature(self) -> float:
        return self.model.temperature if self.eval_temperature is None else self.eval_temperature

    def load_corpus(self, base_dir: Path | None = None):
        if self.data_source == "manifest":
            if not self.data_corpus:
                raise ConfigError("data.corpus: a manifest path is required when "
                                  "data.source = manifest")
            path = Path(self.data_corpus)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"data.corpus: manifest {path} does not exist")
            return read_manifest(path)
        if self.data_source == "synth":
            spec = SyntheticCorpusSpec(n_images=self.synth_images, size=self.synth_size,
                                       seed=self.synth_seed)
            return synth_corpus(spec)
        raise ConfigError(f"data.source must be synth or manifest, got {self.data_source!r}")

    def echo_text(self) -> str:
        return self.raw_text if self.raw_text else config_to_text(self)


# key -> (target, attribute, converter); targets: run / model / train
_KEYS = {
    "seed": ("run", "seed", int),
    "out.dir": ("run", "out_dir", str),
    "data.source": ("run", "data_source", str),
    "data.corpus": ("run", "data_corpus", str),
    "data.synth_images": ("run", "synth_images", int),
    "data.synth_size": ("run", "synth_size", int),
    "data.synth_seed": ("run", "synth_seed", int),
    "eval.samples": ("run", "eval_samples", int),
    "eval.temperature": ("run", "eval_temperature", float),
    "eval.score": ("run", "eval_score", str),
    "model.scale_factor": ("model", "scale_factor", int),
    "model.levels": ("model", "levels", int),
    "model.flow_steps": ("model", "flow_steps", int),
    "model.ncl_blocks": ("model", "ncl_blocks",
                         lambda v: None if v == "auto" else _parse_int_list(v)),
    "model.conditioning": ("model", "conditioning", str),
    "model.encoder_blocks": ("model", "encoder_blocks", int),
    "model.encoder_width": ("model", "encoder_width", int),
    "model.coupling_hidden": ("model", "coupling_hidden", int),
    "model.noise_bound": ("model", "noise_bound", float),
    "model.temperature": ("model", "temperature", float),
    "model.split_prior": ("model", "split_prior", str),
    "model.scale_bound": ("model", "scale_bound", float),
    "model.strict_noise_free": ("model", "strict_noise_free", _parse_bool),
    "train.batch_size": ("train", "batch_size", int),
    "train.patch_hr": ("train", "patch_hr", int),
    "train.lr_init": ("train", "lr_init", float),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.epsilon": ("train", "epsilon", float),
    "train.halve_at": ("train", "halve_at", _parse_int_list),
    "train.total_steps": ("train", "total_steps", int),
    "train.grad_clip": ("train", "grad_clip", float),
    "train.noise_mode": ("train", "noise_mode", str),
    "train.checkpoint_every": ("train", "checkpoint_every", int),
    "train.log_every": ("train", "log_every", int),
}


def parse_config(text: str) -> RunConfig:
    """Parse flat key = value text; reject unknown keys with line numbers."""
    run_kv: dict[str, object] = {}
    model_kv: dict[str, object] = {}
    train_kv: dict[str, object] = {}
    buckets = {"run": run_kv, "model": model_kv, "train": train_kv}
    seen: dict[str, int] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {ln}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = ln
        target, attr, conv = _KEYS[key]
        try:
            buckets[target][attr] = conv(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {ln}: bad value for {key}: {exc}") from exc

    train_kv["seed"] = run_kv.get("seed", 0)  # the train seed follows the run seed
    cfg = RunConfig(model=ModelConfig(**model_kv), train=TrainConfig(**train_kv), **run_kv)
    cfg.raw_text = text
    cfg.model.validate()
    cfg.train.validate()
    if cfg.eval_score not in ("squared", "absolute"):
        raise ConfigError(f"eval.score must be squared or absolute, got {cfg.eval_score!r}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"))


def config_to_text(cfg: RunConfig) -> str:
    """Canonical text for a programmatically built config (parses back equal)."""
    vals = {
        "seed": cfg.seed,
        "out.dir": cfg.out_dir,
        "data.source": cfg.data_source,
        "data.corpus": cfg.data_corpus,
        "data.synth_images": cfg.synth_images,
        "data.synth_size": cfg.synth_size,
        "data.synth_seed": cfg.synth_seed,
        "eval.samples": cfg.eval_samples,
        "eval.score": cfg.eval_score,
        "model.scale_factor": cfg.model.scale_factor,
        "model.levels": cfg.model.levels,
        "model.flow_steps": cfg.model.flow_steps,
        "model.ncl_blocks": ("auto" if cfg.model.ncl_blocks is None
                             else ",".join(map(str, cfg.model.ncl_blocks))),
        "model.conditioning": cfg.model.conditioning,
        "model.encoder_blocks": cfg.model.encoder_blocks,
        "model.encoder_width": cfg.model.encoder_width,
        "model.coupling_hidden": cfg.model.coupling_hidden,
        "model.noise_bound": repr(cfg.model.noise_bound),
        "model.temperature": repr(cfg.model.temperature),
        "model.split_prior": cfg.model.split_prior,
        "model.scale_bound": repr(cfg.model.scale_bound),
        "model.strict_noise_free": int(cfg.model.strict_noise_free),
        "train.batch_size": cfg.train.batch_size,
        "train.patch_hr": cfg.train.patch_hr,
        "train.lr_init": repr(cfg.train.lr_init),
        "train.beta1": repr(cfg.train.beta1),
        "train.beta2": repr(cfg.train.beta2),
        "train.epsilon": repr(cfg.train.epsilon),
        "train.halve_at": ",".join(map(str, cfg.train.halve_at)),
        "train.total_steps": cfg.train.total_steps,
        "train.grad_clip": repr(cfg.train.grad_clip),
        "train.noise_mode": cfg.train.noise_mode,
        "train.checkpoint_every": cfg.train.checkpoint_every,
        "train.log_every": cfg.train.log_every,
    }
    if cfg.eval_temperature is not None:
        vals["eval.temperature"] = repr(cfg.eval_temperature)
    return "\n".join(f"{k} = {v}" for k, v in vals.items()) + "\n"
