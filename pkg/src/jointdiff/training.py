"""Optimization loop over same-subject image sets.

Batches are bucketed by set size: each step draws one size uniformly from
the sizes the corpus can serve, then fills the batch with stored sets of at
least that size, subsampled down to it.  Every random draw of step k flows
from default_rng([seed, k]), so a run resumed from any checkpoint continues
bit-exactly as if it had never stopped.
"""

from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import ImageSet, training_loss
from .errors import ConfigError, FormatError
from .optim import Adam
from .text import Vocabulary
from .toygen.records import load_dataset
from .unet import MAX_SET_SIZE, DenoiserConfig, JointDenoiser

LOSS_LOG_NAME = "loss.csv"
_CHECKPOINT_RE = re.compile(r"ckpt_(\d{6})\.ckpt")


@dataclass
class TrainConfig:
    """Optimizer and loop hyperparameters."""

    lr: float = 2e-4
    batch: int = 16
    steps: int = 2000
    seed: int = 0
    text_dropout: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be at least 1, got {self.batch}")
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")
        if not 0.0 <= self.text_dropout <= 1.0:
            raise ConfigError(
                f"text_dropout must lie in [0, 1], got {self.text_dropout}")


def load_training_sets(dataset_dir) -> list:
    """Read a generated dataset into model-space image sets."""
    records = load_dataset(dataset_dir)
    if not records:
        raise FormatError(f"{dataset_dir}: dataset has no samples")
    sets = []
    for rec in records:
        imgs = rec.images.astype(np.float32) / 127.5 - 1.0
        imgs = np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))
        sets.append(ImageSet(imgs, list(rec.captions),
                             subject_id=str(rec.subject_id)))
    return sets


def feasible_sizes(sets) -> tuple:
    """Set sizes the corpus can serve by subsampling its stored sets.

    Multi-image corpora train on sizes 2..4 (capped by the largest stored
    set); a corpus of singletons trains on size 1.
    """
    largest = max(s.n for s in sets)
    if largest == 1:
        return (1,)
    return tuple(n for n in range(2, MAX_SET_SIZE + 1) if n <= largest)


def draw_batch(sets, size: int, count: int, rng: np.random.Generator) -> list:
    """Pick `count` sets of at least `size` members, cut down to `size`."""
    eligible = [s for s in sets if s.n >= size]
    if not eligible:
        raise ValueError(f"no stored set has {size} or more members")
    picks = rng.integers(0, len(eligible), size=count)
    batch = []
    for i in picks:
        s = eligible[int(i)]
        if s.n > size:
            keep = rng.choice(s.n, size=size, replace=False)
            s = ImageSet(s.images[keep], [s.captions[int(j)] for j in keep],
                         subject_id=s.subject_id)
        batch.append(s)
    return batch


def checkpoint_path(out_dir, step: int) -> str:
    return os.path.join(out_dir, f"ckpt_{step:06d}.ckpt")


def latest_checkpoint(out_dir):
    """Path of the highest-step checkpoint in a directory, or None."""
    if not os.path.isdir(out_dir):
        return None
    best = None
    for name in os.listdir(out_dir):
        m = _CHECKPOINT_RE.fullmatch(name)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), os.path.join(out_dir, name))
    return None if best is None else best[1]


def _load_into(model, tensors, path):
    for name, p in model.named_parameters():
        arr = tensors.get(name)
        if arr is None:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if arr.shape != p.data.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape "
                              f"{arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(np.float32).copy()


def restore_model(path):
    """Rebuild the denoiser and vocabulary stored in a checkpoint.

    Returns (model, vocab, step, meta) where meta is the config blob the
    checkpoint was saved with.
    """
    tensors, step, meta = load_checkpoint(path)
    try:
        cfg = DenoiserConfig.from_dict(meta["model"])
        vocab = Vocabulary(meta["vocabulary"])
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint config lacks {exc}") from exc
    model = JointDenoiser(cfg, np.random.default_rng(0))
    _load_into(model, tensors, path)
    return model, vocab, step, meta


def _save(model, opt, vocab, config: TrainConfig, out_dir, step: int) -> str:
    tensors = [(name, p.data) for name, p in model.named_parameters()]
    tensors.extend(opt.state_tensors().items())
    meta = {"model": model.config.to_dict(),
            "vocabulary": vocab.to_list(),
            "train": asdict(config)}
    path = checkpoint_path(out_dir, step)
    save_checkpoint(path, tensors, step, meta)
    return path


def _reset_log(path, step: int):
    """Rewrite the loss log so it ends at `step`, keeping the header."""
    rows = []
    if step > 0 and os.path.exists(path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        for line in lines[1:]:
            if line and int(line.split(",")[0]) <= step:
                rows.append(line)
    with open(path, "w") as fh:
        fh.write("step, loss\n")
        for line in rows:
            fh.write(line + "\n")


def train(model, schedule, sets, vocab, config: TrainConfig, out_dir,
          checkpoint_every: int = 500, progress=None) -> list:
    """Run the loop, appending to the loss log and writing checkpoints.

    When out_dir already holds a checkpoint, weights, Adam moments and the
    step counter are restored from the newest one and the loss log is
    truncated back to that step, so the continuation matches an
    uninterrupted run row for row.  progress, if given, is called with
    (step, loss) after every step.  Returns the (step, loss) pairs of the
    steps this call executed.
    """
    os.makedirs(out_dir, exist_ok=True)
    opt = Adam(model.named_parameters(), lr=config.lr)
    start = 0
    resume = latest_checkpoint(out_dir)
    if resume is not None:
        tensors, start, _ = load_checkpoint(resume)
        _load_into(model, tensors, resume)
        opt.load_state_tensors(tensors, start)
    log_path = os.path.join(out_dir, LOSS_LOG_NAME)
    _reset_log(log_path, start)
    sizes = feasible_sizes(sets)
    losses = []
    with open(log_path, "a") as log:
        for step in range(start + 1, config.steps + 1):
            rng = np.random.default_rng([config.seed, step])
            size = int(sizes[rng.integers(0, len(sizes))])
            batch = draw_batch(sets, size, config.batch, rng)
            loss = training_loss(batch, model, schedule, vocab, rng,
                                 text_dropout=config.text_dropout)
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = float(loss.data)
            losses.append((step, value))
            log.write(f"{step}, {value:.6f}\n")
            if step % checkpoint_every == 0 or step == config.steps:
                log.flush()
                _save(model, opt, vocab, config, out_dir, step)
            if progress is not None:
                progress(step, value)
    return losses
