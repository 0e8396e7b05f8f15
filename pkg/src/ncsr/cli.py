"""Command-line interface: train, sample, eval, verify, synth-data.

Every command is a pure function of (config, seed, inputs): reruns with
identical arguments produce byte-identical primary outputs. Run
directories record the verbatim config echo, the seed, a build
identifier and checkpoint content hashes.

Exit codes: 0 success, 1 failed verification / all-images-failed eval,
2 invalid configuration or input, 3 training abort.
"""

from __future__ import annotations

import argparse
import hashlib
import platform
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .data import ImageFormatError, load_png, read_manifest, save_png, write_manifest
from .metrics import evaluate
from .model import NCSRModel, load_checkpoint, save_checkpoint
from .rng import Rng
from .tensor import ShapeError
from .train import TrainingDiverged, train
from .verify import run_verify

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_ABORT = 3


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _build_id() -> str:
    return f"ncsr-{__version__}+py{platform.python_version()}"


def _write_run_info(run_dir: Path, seed: int, extra: dict[str, str]) -> None:
    lines = [f"seed = {seed}", f"build = {_build_id()}"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    (run_dir / "run_info.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        corpus = cfg.load_corpus(Path(args.config).parent)
        cfg.model.validate_patch(cfg.train.patch_hr)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.echo_text(), encoding="utf-8")

    model = NCSRModel(cfg.model, Rng(cfg.seed))
    log = print if not args.quiet else None
    try:
        train(model, corpus, cfg.train, out_dir=run_dir, log_fn=log)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    final = run_dir / "final.ckpt"
    _write_run_info(run_dir, cfg.seed, {"checkpoint_sha256": _sha256(final)})
    print(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_sample(args) -> int:
    try:
        model, _step, _rng_state = load_checkpoint(args.checkpoint)
        lr_img = load_png(args.input)
    except (ConfigError, ImageFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    depth = 2**model.config.levels
    if lr_img.shape[2] % depth or lr_img.shape[3] % depth:
        print(f"error: LR image {lr_img.shape[2]}x{lr_img.shape[3]} incompatible with "
              f"checkpoint (needs sides divisible by {depth})", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(args.seed)
    try:
        samples = model.sample(lr_img, temperature=args.temperature, rng=rng,
                               n_samples=args.n)
    except (ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for i, s in enumerate(samples):
        save_png(out_dir / f"sample_{i:03d}.png", s)
    sidecar = [
        f"checkpoint = {args.checkpoint}",
        f"checkpoint_sha256 = {_sha256(Path(args.checkpoint))}",
        f"input = {args.input}",
        f"temperature = {args.temperature!r}",
        f"seed = {args.seed}",
        f"n_samples = {args.n}",
        f"build = {_build_id()}",
    ]
    (out_dir / "samples_meta.txt").write_text("\n".join(sidecar) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} samples to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, _step, _rng_state = load_checkpoint(args.checkpoint)
        testset = read_manifest(args.manifest)
    except (ConfigError, ImageFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    temperature = model.config.temperature if args.temperature is None else args.temperature
    report = evaluate(model, testset, n_samples=args.n, temperature=temperature,
                      rng=Rng(args.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (out_dir / "report_summary.txt").write_text(report.to_keyvalues(), encoding="utf-8")
    for image, err in report.failures:
        print(f"image {image} failed: {err}", file=sys.stderr)
    print(report.summary_line())
    if not report.rows:
        return EXIT_FAIL
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_verify(args.level, args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_synth_data(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .data import SyntheticCorpusSpec, synth_corpus

    spec = SyntheticCorpusSpec(n_images=cfg.synth_images, size=cfg.synth_size,
                               seed=cfg.synth_seed)
    records = synth_corpus(spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        path = out_dir / f"{rec.id}.png"
        save_png(path, rec.hr)
        rec.hr_path = path.name
    write_manifest(out_dir / "manifest.tsv", records)
    print(f"wrote {len(records)} images and manifest.tsv to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncsr",
                                     description="Noise-conditional flow super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("-c", "--config", required=True)
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(fn=cmd_train)

    p_sample = sub.add_parser("sample", help="draw HR samples for one LR image")
    p_sample.add_argument("-k", "--checkpoint", required=True)
    p_sample.add_argument("-i", "--input", required=True)
    p_sample.add_argument("-n", type=int, default=1)
    p_sample.add_argument("-t", "--temperature", type=float, default=0.9)
    p_sample.add_argument("-s", "--seed", type=int, default=0)
    p_sample.add_argument("-o", "--out", required=True)
    p_sample.set_defaults(fn=cmd_sample)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p_eval.add_argument("-k", "--checkpoint", required=True)
    p_eval.add_argument("-m", "--manifest", required=True)
    p_eval.add_argument("-n", type=int, default=10)
    p_eval.add_argument("-t", "--temperature", type=float, default=None)
    p_eval.add_argument("-s", "--seed", type=int, default=0)
    p_eval.add_argument("-o", "--out", default="eval_out")
    p_eval.set_defaults(fn=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the property/oracle self checks")
    p_verify.add_argument("--level", choices=("quick", "full"), default="quick")
    p_verify.add_argument("-s", "--seed", type=int, default=0)
    p_verify.set_defaults(fn=cmd_verify)

    p_synth = sub.add_parser("synth-data", help="generate a synthetic PNG corpus")
    p_synth.add_argument("-c", "--config", required=True)
    p_synth.add_argument("-o", "--out", required=True)
    p_synth.set_defaults(fn=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
