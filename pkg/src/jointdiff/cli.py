"""Command-line interface: gen-data, train, personalize and eval.

Exit codes: 0 on success, 2 for usage or configuration errors, 3 for I/O
and data errors.  Diagnostics go to stderr; stdout carries the paths of
the artifacts a command produced, one per line.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import default_lines, load_run_config, write_run_json
from .diffusion import GuidanceConfig, NoiseSchedule, personalize
from .errors import ConfigError, FormatError
from .evalharness import evaluate, guidance_sweep, to_uint8_image
from .text import Vocabulary
from .toygen.pipeline import generate_dataset
from .toygen.ppm import read_ppm, write_ppm
from .toygen.records import MANIFEST_NAME, read_manifest
from .training import (latest_checkpoint, load_training_sets, restore_model,
                       train)
from .unet import MAX_SET_SIZE, JointDenoiser


class _Help(argparse.RawDescriptionHelpFormatter):
    """Fixed-width formatter so help text does not depend on the terminal."""

    def __init__(self, prog):
        super().__init__(prog, width=80)


def _emit(path):
    print(path)


def cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.subjects, args.sets_per_subject,
                                args.out, seed=args.seed,
                                image_size=args.image_size,
                                threshold=args.threshold)
    print(f"wrote {len(manifest['samples'])} sets", file=sys.stderr)
    _emit(os.path.join(args.out, MANIFEST_NAME))
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    sets = load_training_sets(config.data.dir)
    vocab = Vocabulary(read_manifest(config.data.dir)["vocabulary"])
    model_cfg = config.model.build(vocab.size)
    if model_cfg.vocab_size < vocab.size:
        raise ConfigError(f"model.vocab_size {model_cfg.vocab_size} is "
                          f"smaller than the dataset vocabulary ({vocab.size})")
    model = JointDenoiser(model_cfg, np.random.default_rng(config.train.seed))
    schedule = NoiseSchedule(model_cfg.max_timesteps)
    os.makedirs(args.out, exist_ok=True)
    write_run_json(config, args.out)

    def report(step, loss):
        if step % 100 == 0 or step == config.train.steps:
            print(f"step {step}/{config.train.steps} loss {loss:.4f}",
                  file=sys.stderr)

    train(model, schedule, sets, vocab, config.train, args.out,
          checkpoint_every=args.checkpoint_every, progress=report)
    _emit(os.path.join(args.out, "loss.csv"))
    _emit(latest_checkpoint(args.out))
    return 0


def _load_reference(path, image_size: int) -> np.ndarray:
    image = read_ppm(path)
    if image.shape[0] != image_size or image.shape[1] != image_size:
        raise ConfigError(f"{path}: reference is {image.shape[1]}x"
                          f"{image.shape[0]}, the model wants "
                          f"{image_size}x{image_size}")
    return image


def _encode_prompts(vocab, captions, length: int) -> np.ndarray:
    try:
        return vocab.encode_batch(captions, length)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _contact_sheet(tiles) -> np.ndarray:
    """Lay uint8 tiles side by side with one white separator column."""
    height = tiles[0].shape[0]
    gap = np.full((height, 1, 3), 255, dtype=np.uint8)
    strip = [tiles[0]]
    for tile in tiles[1:]:
        strip.extend([gap, tile])
    return np.concatenate(strip, axis=1)


def cmd_personalize(args) -> int:
    refs = args.ref or []
    captions = args.ref_caption or []
    prompts = args.prompt or []
    if not 1 <= len(refs) <= MAX_SET_SIZE - 1:
        raise ConfigError(f"between 1 and {MAX_SET_SIZE - 1} references "
                          f"are required, got {len(refs)}")
    if len(captions) != len(refs):
        raise ConfigError(f"{len(refs)} references but "
                          f"{len(captions)} reference captions")
    if not prompts:
        raise ConfigError("at least one --prompt is required")
    if any(not p.strip() for p in prompts) or any(not c.strip() for c in captions):
        raise ConfigError("captions and prompts must not be empty")
    if len(refs) + len(prompts) > MAX_SET_SIZE:
        raise ConfigError(f"references plus prompts must not exceed "
                          f"{MAX_SET_SIZE}, got {len(refs)} + {len(prompts)}")
    guidance = GuidanceConfig.parse(args.guidance)

    model, vocab, _, _ = restore_model(args.ckpt)
    size = model.config.image_size
    tk = model.config.max_caption_tokens
    ref_images = np.stack([_load_reference(p, size) for p in refs])
    ref_floats = ref_images.astype(np.float32).transpose(0, 3, 1, 2) / 127.5 - 1.0
    ref_ids = _encode_prompts(vocab, captions, tk)
    target_ids = _encode_prompts(vocab, prompts, tk)

    schedule = NoiseSchedule(model.config.max_timesteps)
    rng = np.random.default_rng(args.seed)
    out_set = personalize(ref_floats, ref_ids, target_ids, model, schedule,
                          guidance, rng, num_steps=args.steps)

    os.makedirs(args.out, exist_ok=True)
    generated = [to_uint8_image(x) for x in out_set[len(refs):]]
    for i, image in enumerate(generated):
        path = os.path.join(args.out, f"gen_{i:02d}.ppm")
        write_ppm(path, image)
        _emit(path)
    sheet = os.path.join(args.out, "contact.ppm")
    write_ppm(sheet, _contact_sheet(list(ref_images) + generated))
    _emit(sheet)
    return 0


def cmd_eval(args) -> int:
    model, _, _, _ = restore_model(args.ckpt)
    schedule = NoiseSchedule(model.config.max_timesteps)
    os.makedirs(args.out, exist_ok=True)
    if args.sweep:
        guidance_sweep(model, schedule, args.testset, out_dir=args.out,
                       num_steps=args.steps, seed=args.seed,
                       max_subjects=args.max_subjects)
        _emit(os.path.join(args.out, "report.csv"))
        _emit(os.path.join(args.out, "tradeoff.svg"))
        return 0
    report = evaluate(model, schedule, args.testset,
                      GuidanceConfig.parse(args.guidance),
                      num_steps=args.steps, seed=args.seed,
                      max_subjects=args.max_subjects)
    path = os.path.join(args.out, "report.csv")
    with open(path, "w") as fh:
        fh.write(report.to_csv())
    if report.excluded:
        print(f"excluded {report.excluded} empty generations", file=sys.stderr)
    _emit(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointdiff", formatter_class=_Help,
        description="Set-based diffusion: dataset synthesis, training, "
                    "personalization and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", formatter_class=_Help,
                       help="synthesize a same-subject sprite dataset")
    p.add_argument("--subjects", type=int, required=True,
                   help="number of distinct subjects")
    p.add_argument("--sets-per-subject", type=int, required=True,
                   help="image sets rendered per subject")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="rng seed (default 0)")
    p.add_argument("--image-size", type=int, default=32,
                   help="square image side in pixels (default 32)")
    p.add_argument("--threshold", type=float, default=0.95,
                   help="same-subject similarity threshold (default 0.95)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser(
        "train", formatter_class=_Help,
        help="train the denoiser from a run.json config",
        epilog="config keys and defaults:\n  " + "\n  ".join(default_lines())
               + "\n\nmodel.vocab_size 0 takes the dataset vocabulary size.")
    p.add_argument("--config", required=True, help="path to run.json")
    p.add_argument("--out", required=True,
                   help="directory for checkpoints and the loss log")
    p.add_argument("--checkpoint-every", type=int, default=500,
                   help="steps between checkpoints (default 500)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("personalize", formatter_class=_Help,
                       help="generate prompted images of a reference subject")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--ref", action="append",
                   help="reference PPM image (repeat for up to 3)")
    p.add_argument("--ref-caption", action="append",
                   help="caption of the matching --ref, in order")
    p.add_argument("--prompt", action="append",
                   help="target caption (repeat for several outputs)")
    p.add_argument("--guidance", default="joint:3.0",
                   help="strategy[:scale[:scale2]] (default joint:3.0)")
    p.add_argument("--steps", type=int, default=100,
                   help="sampling steps (default 100)")
    p.add_argument("--seed", type=int, default=0, help="rng seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("eval", formatter_class=_Help,
                       help="score personalization on a held-out testset")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--testset", required=True, help="generated dataset dir")
    p.add_argument("--sweep", action="store_true",
                   help="sweep all guidance strategies and scales")
    p.add_argument("--guidance", default="joint:3.0",
                   help="strategy[:scale[:scale2]] when not sweeping "
                        "(default joint:3.0)")
    p.add_argument("--steps", type=int, default=100,
                   help="sampling steps (default 100)")
    p.add_argument("--seed", type=int, default=0, help="rng seed (default 0)")
    p.add_argument("--max-subjects", type=int, default=None,
                   help="cap the number of scored subjects")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
