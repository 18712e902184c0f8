"""Forward/reverse diffusion over image sets, guidance, and personalization.

Sampling treats personalization as set inpainting: reference slots are known,
target slots are unknown.  After every reverse step the known slots are
overwritten with a forward-diffused copy of the clean references at the new
noise level, so at the end of the chain they equal the references exactly and
the unknown slots have been generated in their presence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .unet import MAX_SET_SIZE, JointDenoiser, pack_input

GUIDANCE_STRATEGIES = ("joint", "text_first", "image_first", "text_only")


class NoiseSchedule:
    """Variance schedule tables for a T-step diffusion chain.

    Timesteps are 1-based: t runs over [1, T].  `timesteps[i-1]` maps chain
    position i to the timestep fed to the denoiser, which matters for strided
    schedules produced by `strided()`.
    """

    def __init__(self, num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if num_steps < 1:
            raise ConfigError(f"schedule needs at least 1 step, got {num_steps}")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ConfigError(f"invalid beta range [{beta_start}, {beta_end}]")
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
        self._init_tables(betas, np.arange(1, num_steps + 1, dtype=np.int64))

    def _init_tables(self, betas64, timesteps):
        alphas64 = 1.0 - betas64
        alpha_bars64 = np.cumprod(alphas64)
        self._alpha_bars64 = alpha_bars64
        self.betas = betas64.astype(np.float32)
        self.alphas = alphas64.astype(np.float32)
        self.alpha_bars = alpha_bars64.astype(np.float32)
        self.timesteps = timesteps

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def model_t(self, t: int) -> int:
        """Denoiser-facing timestep for chain position t."""
        self._check_t(t)
        return int(self.timesteps[t - 1])

    def strided(self, num_steps: int) -> "NoiseSchedule":
        """Uniform subsequence of this schedule with `num_steps` positions.

        The returned schedule satisfies the same algebra (its alpha_bar table
        is a subsequence of this one), and its `timesteps` record which
        original timesteps each position corresponds to.
        """
        if not 1 <= num_steps <= self.T:
            raise ConfigError(f"strided steps {num_steps} outside [1, {self.T}]")
        taus = np.unique(np.round(np.linspace(1, self.T, num_steps)).astype(np.int64))
        abar_sub = self._alpha_bars64[taus - 1]
        prev = np.concatenate([[1.0], abar_sub[:-1]])
        betas_sub = 1.0 - abar_sub / prev
        sub = object.__new__(NoiseSchedule)
        sub._init_tables(betas_sub, self.timesteps[taus - 1])
        return sub


@dataclass
class ImageSet:
    """A set of same-subject images with per-image captions."""

    images: np.ndarray
    captions: list
    subject_id: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"image set must be [N, 3, H, W], got {self.images.shape}")
        n = self.images.shape[0]
        if not 1 <= n <= MAX_SET_SIZE:
            raise ValueError(f"set size {n} outside [1, {MAX_SET_SIZE}]")
        if len(self.captions) != n:
            raise ValueError(f"{len(self.captions)} captions for {n} images")
        if np.max(np.abs(self.images)) > 1.0 + 1e-5:
            raise ValueError("image values must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return self.images.shape[0]


@dataclass
class ReferenceCondition:
    """Per-slot conditioning: which slots are unknown, and masked references.

    m[i] = 1 marks slot i as unknown (to generate); its reference channels are
    zero.  m[i] = 0 marks a known slot whose clean image is visible.
    """

    m: np.ndarray
    mask_maps: np.ndarray
    masked_clean: np.ndarray

    @classmethod
    def build(cls, clean_images: np.ndarray, m: np.ndarray) -> "ReferenceCondition":
        clean_images = np.asarray(clean_images, dtype=np.float32)
        m = np.asarray(m)
        if clean_images.ndim != 4 or clean_images.shape[1] != 3:
            raise ShapeError(f"clean images must be [N, 3, H, W], got {clean_images.shape}")
        if m.shape != (clean_images.shape[0],):
            raise ShapeError(f"mask vector shape {m.shape} does not match {clean_images.shape[0]} slots")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask vector entries must be 0 or 1")
        n, _, h, w = clean_images.shape
        maps = np.broadcast_to(m.astype(np.float32)[:, None, None, None], (n, 1, h, w)).copy()
        masked = clean_images * (1.0 - maps)
        return cls(m=m.astype(np.uint8), mask_maps=maps, masked_clean=masked)

    @classmethod
    def all_unknown(cls, n: int, h: int, w: int) -> "ReferenceCondition":
        return cls.build(np.zeros((n, 3, h, w), dtype=np.float32), np.ones(n, dtype=np.uint8))


def sample_reference_mask(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw the per-slot unknown mask: each slot independently 0 or 1 with
    probability one half."""
    if not 1 <= n <= MAX_SET_SIZE:
        raise ValueError(f"set size {n} outside [1, {MAX_SET_SIZE}]")
    return rng.integers(0, 2, size=n).astype(np.uint8)


def forward_diffuse(x0: np.ndarray, t: int, schedule: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """Closed-form forward process: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} does not match x0 shape {x0.shape}")
    abar = schedule.alpha_bar(t)
    return (np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise).astype(x0.dtype)


def _ddpm_mean(x_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    beta = schedule.beta(t)
    coef = beta / np.sqrt(1.0 - schedule.alpha_bar(t))
    return ((x_t - coef * eps_hat) / np.sqrt(schedule.alpha(t))).astype(x_t.dtype)


def ddpm_step(x_t, eps_hat, t: int, schedule: NoiseSchedule, rng=None, noise=None):
    """One ancestral reverse step x_t -> x_{t-1} with sigma_t^2 = beta_t.

    No noise is added at t = 1.  `noise` overrides the rng draw (pass zeros
    for a deterministic step).
    """
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if eps_hat.shape != x_t.shape:
        raise ShapeError(f"eps shape {eps_hat.shape} does not match state shape {x_t.shape}")
    mean = _ddpm_mean(x_t, eps_hat, t, schedule)
    if t == 1:
        return mean
    if noise is None:
        if rng is None:
            raise ValueError("ddpm_step needs an rng or explicit noise for t > 1")
        noise = rng.standard_normal(x_t.shape)
    sigma = np.sqrt(schedule.beta(t))
    return (mean + sigma * noise).astype(x_t.dtype)


@dataclass
class GuidanceConfig:
    """Sampling-time guidance strategy and scales.

    joint and text_only take one scale.  text_first and image_first take two:
    the first weights the partially conditioned score, the second the fully
    conditioned one.  A single scale given for a two-scale strategy sets the
    second and leaves the first at 1.
    """

    strategy: str = "joint"
    scales: tuple = (3.0,)

    def __post_init__(self):
        if self.strategy not in GUIDANCE_STRATEGIES:
            raise ConfigError(f"unknown guidance strategy {self.strategy!r}; "
                              f"choose from {', '.join(GUIDANCE_STRATEGIES)}")
        scales = tuple(float(s) for s in np.atleast_1d(np.asarray(self.scales, dtype=np.float64)))
        if not all(np.isfinite(s) and s >= 0 for s in scales):
            raise ConfigError(f"guidance scales must be finite and non-negative, got {scales}")
        if self.strategy in ("joint", "text_only"):
            if len(scales) != 1:
                raise ConfigError(f"strategy {self.strategy} takes one scale, got {scales}")
        else:
            if len(scales) == 1:
                scales = (1.0, scales[0])
            elif len(scales) != 2:
                raise ConfigError(f"strategy {self.strategy} takes at most two scales, got {scales}")
        self.scales = scales

    @classmethod
    def parse(cls, spec: str) -> "GuidanceConfig":
        """Parse 'strategy[:scale[:scale2]]', e.g. 'text_first:1.0:7.5'."""
        parts = spec.split(":")
        strategy = parts[0]
        if len(parts) == 1:
            return cls(strategy=strategy, scales=(1.0, 3.0) if strategy in ("text_first", "image_first") else (3.0,))
        try:
            scales = tuple(float(p) for p in parts[1:])
        except ValueError as exc:
            raise ConfigError(f"bad guidance scale in {spec!r}") from exc
        return cls(strategy=strategy, scales=scales)

    def describe(self) -> str:
        return ":".join([self.strategy] + [f"{s:g}" for s in self.scales])


@dataclass
class GuidedScoreBreakdown:
    """The component scores combined by guidance, plus the blended result."""

    eps_uncond: np.ndarray
    eps_partial: np.ndarray | None
    eps_full: np.ndarray
    eps_guided: np.ndarray


def _null_condition_arrays(mask_maps, masked_clean):
    return np.ones_like(mask_maps), np.zeros_like(masked_clean)


def guided_epsilon(x_t: np.ndarray, mask_maps: np.ndarray, masked_clean: np.ndarray,
                   token_ids: np.ndarray, t, config: GuidanceConfig,
                   model: JointDenoiser) -> GuidedScoreBreakdown:
    """Blend denoiser scores under dropped-out conditionings.

    x_t: [B, N, 3, H, W] chain state; mask_maps/masked_clean: matching
    conditioning arrays; token_ids: [B, N, Tk]; t: [B] timesteps.  The
    unconditional score nulls both the captions and the references; which
    intermediate score exists depends on the strategy.
    """
    x_t = np.asarray(x_t)
    b, n = x_t.shape[:2]
    t = np.asarray(t).reshape(-1)
    null_maps, null_clean = _null_condition_arrays(mask_maps, masked_clean)
    null_ids = np.zeros_like(token_ids)

    variants = [(null_maps, null_clean, null_ids)]
    if config.strategy == "joint":
        variants.append((mask_maps, masked_clean, token_ids))
    elif config.strategy == "text_only":
        variants.append((null_maps, null_clean, token_ids))
    elif config.strategy == "text_first":
        variants.append((null_maps, null_clean, token_ids))
        variants.append((mask_maps, masked_clean, token_ids))
    elif config.strategy == "image_first":
        variants.append((mask_maps, masked_clean, null_ids))
        variants.append((mask_maps, masked_clean, token_ids))

    # One forward pass per conditioning variant.  Keeping the batch identical
    # for a given variant makes its score bitwise reproducible across
    # strategies, so blend identities hold to float32 rounding.
    parts = []
    for maps, clean, ids in variants:
        packed = np.concatenate([maps, x_t, clean], axis=2)
        parts.append(model.predict_epsilon(packed, t, ids).data.astype(x_t.dtype))

    eps_uncond = parts[0]
    if config.strategy in ("joint", "text_only"):
        eps_full = parts[1]
        eps_partial = None
        lam = config.scales[0]
        if lam == 1.0:
            eps_guided = eps_full.copy()
        else:
            e0, ef = eps_uncond.astype(np.float64), eps_full.astype(np.float64)
            eps_guided = e0 + lam * (ef - e0)
    else:
        eps_partial, eps_full = parts[1], parts[2]
        lam1, lam2 = config.scales
        e0 = eps_uncond.astype(np.float64)
        e1 = eps_partial.astype(np.float64)
        ef = eps_full.astype(np.float64)
        eps_guided = e0 + lam1 * (e1 - e0) + lam2 * (ef - e1)
    return GuidedScoreBreakdown(eps_uncond, eps_partial, eps_full, eps_guided.astype(x_t.dtype))


@dataclass
class _ChainJob:
    """One reverse-diffusion job inside a batched chain."""

    ref_images: np.ndarray      # [n_refs, 3, H, W], possibly empty
    token_ids: np.ndarray       # [N, Tk] caption ids for every slot
    rng: np.random.Generator
    trace: object = None        # optional callable(t_prev, x_set, replacement_noise)


def _run_reverse_chain(jobs, model: JointDenoiser, schedule: NoiseSchedule,
                       config: GuidanceConfig, num_steps: int | None = None):
    """Run a batch of same-shape jobs through one guided reverse chain."""
    cfg = model.config
    h = w = cfg.image_size
    n = jobs[0].token_ids.shape[0]
    b = len(jobs)
    sub = schedule.strided(num_steps) if num_steps is not None and num_steps != schedule.T else schedule

    mask_maps = np.zeros((b, n, 1, h, w), dtype=np.float32)
    masked_clean = np.zeros((b, n, 3, h, w), dtype=np.float32)
    token_ids = np.stack([j.token_ids for j in jobs])
    x = np.zeros((b, n, 3, h, w), dtype=np.float32)
    n_refs = [j.ref_images.shape[0] for j in jobs]

    t_top = sub.model_t(sub.T)
    for bi, job in enumerate(jobs):
        k = n_refs[bi]
        m = np.ones(n, dtype=np.uint8)
        m[:k] = 0
        clean = np.zeros((n, 3, h, w), dtype=np.float32)
        clean[:k] = job.ref_images
        cond = ReferenceCondition.build(clean, m)
        mask_maps[bi] = cond.mask_maps
        masked_clean[bi] = cond.masked_clean
        x[bi] = job.rng.standard_normal((n, 3, h, w)).astype(np.float32)
        if k:
            z0 = job.rng.standard_normal((k, 3, h, w)).astype(np.float32)
            x[bi, :k] = forward_diffuse(job.ref_images, t_top, schedule, z0)

    for i in range(sub.T, 0, -1):
        t_model = sub.model_t(i)
        t_vec = np.full(b, t_model, dtype=np.int64)
        breakdown = guided_epsilon(x, mask_maps, masked_clean, token_ids, t_vec, config, model)
        mean = _ddpm_mean(x, breakdown.eps_guided, i, sub)
        t_prev = sub.model_t(i - 1) if i > 1 else 0
        if i > 1:
            sigma = np.sqrt(sub.beta(i))
            for bi, job in enumerate(jobs):
                x[bi] = mean[bi] + sigma * job.rng.standard_normal((n, 3, h, w)).astype(np.float32)
        else:
            x = mean
        for bi, job in enumerate(jobs):
            k = n_refs[bi]
            z_rep = None
            if k:
                if t_prev >= 1:
                    z_rep = job.rng.standard_normal((k, 3, h, w)).astype(np.float32)
                    x[bi, :k] = forward_diffuse(job.ref_images, t_prev, schedule, z_rep)
                else:
                    x[bi, :k] = job.ref_images
            if job.trace is not None:
                job.trace(t_prev, x[bi].copy(), None if z_rep is None else z_rep.copy())

    for bi, job in enumerate(jobs):
        k = n_refs[bi]
        x[bi, k:] = np.clip(x[bi, k:], -1.0, 1.0)
    return x


def personalize(ref_images: np.ndarray, ref_token_ids: np.ndarray, target_token_ids: np.ndarray,
                model: JointDenoiser, schedule: NoiseSchedule, config: GuidanceConfig,
                rng: np.random.Generator, num_steps: int | None = None, trace=None) -> np.ndarray:
    """Generate target slots alongside known reference slots.

    ref_images: [n_refs, 3, H, W] clean references in [-1, 1] (at least one).
    ref_token_ids / target_token_ids: [n_refs, Tk] and [n_targets, Tk].
    Returns the full set [n_refs + n_targets, 3, H, W]; slots beyond the
    references hold the generated images, and the reference slots round-trip
    exactly.
    """
    ref_images = np.asarray(ref_images, dtype=np.float32)
    if ref_images.ndim != 4 or ref_images.shape[0] < 1:
        raise ValueError(f"need at least one reference image, got shape {ref_images.shape}")
    n = ref_images.shape[0] + target_token_ids.shape[0]
    if n > MAX_SET_SIZE:
        raise ValueError(f"set size {n} exceeds maximum {MAX_SET_SIZE}")
    token_ids = np.concatenate([ref_token_ids, target_token_ids], axis=0)
    job = _ChainJob(ref_images=ref_images, token_ids=token_ids, rng=rng, trace=trace)
    return _run_reverse_chain([job], model, schedule, config, num_steps)[0]


def personalize_batch(jobs, model: JointDenoiser, schedule: NoiseSchedule,
                      config: GuidanceConfig, num_steps: int | None = None) -> np.ndarray:
    """Run several personalization jobs through one batched reverse chain.

    jobs: list of (ref_images [k,3,H,W], ref_token_ids [k,Tk],
    target_token_ids [n-k,Tk], rng) tuples.  Every job must share the same
    set size, reference count and token length, and each job consumes only
    its own rng, so results are independent of how jobs are grouped into
    batches.  Returns the stacked sets, [len(jobs), N, 3, H, W].
    """
    if not jobs:
        raise ValueError("personalize_batch needs at least one job")
    chain_jobs = []
    for ref_images, ref_token_ids, target_token_ids, rng in jobs:
        ref_images = np.asarray(ref_images, dtype=np.float32)
        if ref_images.ndim != 4 or ref_images.shape[0] < 1:
            raise ValueError(f"need at least one reference image, got shape {ref_images.shape}")
        n = ref_images.shape[0] + target_token_ids.shape[0]
        if n > MAX_SET_SIZE:
            raise ValueError(f"set size {n} exceeds maximum {MAX_SET_SIZE}")
        token_ids = np.concatenate([ref_token_ids, target_token_ids], axis=0)
        chain_jobs.append(_ChainJob(ref_images=ref_images, token_ids=token_ids, rng=rng))
    shapes = {(j.ref_images.shape, j.token_ids.shape) for j in chain_jobs}
    if len(shapes) > 1:
        raise ShapeError(f"jobs in one batch must share shapes, got {sorted(shapes)}")
    return _run_reverse_chain(chain_jobs, model, schedule, config, num_steps)


def sample_joint(token_ids: np.ndarray, model: JointDenoiser, schedule: NoiseSchedule,
                 config: GuidanceConfig, rng: np.random.Generator,
                 num_steps: int | None = None) -> np.ndarray:
    """Generate a full set from captions alone (every slot unknown)."""
    token_ids = np.asarray(token_ids)
    n = token_ids.shape[0]
    if not 1 <= n <= MAX_SET_SIZE:
        raise ValueError(f"set size {n} outside [1, {MAX_SET_SIZE}]")
    h = model.config.image_size
    job = _ChainJob(ref_images=np.zeros((0, 3, h, h), dtype=np.float32),
                    token_ids=token_ids, rng=rng)
    return _run_reverse_chain([job], model, schedule, config, num_steps)[0]


def training_loss(batch, model: JointDenoiser, schedule: NoiseSchedule, vocab,
                  rng: np.random.Generator, text_dropout: float = 0.1):
    """Denoising loss over a batch of same-size image sets.

    For each set: one shared timestep, per-slot Bernoulli(0.5) unknown masks,
    and per-image caption dropout with probability `text_dropout`.  The loss
    is the mean squared error between true and predicted noise over every
    slot, known and unknown alike.
    """
    if not batch:
        raise ValueError("training batch is empty")
    n = batch[0].n
    if any(s.n != n for s in batch):
        raise ShapeError("all sets in a batch must share one set size")
    tk = model.config.max_caption_tokens

    packed, ids, ts, targets = [], [], [], []
    for s in batch:
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(s.images.shape).astype(np.float32)
        m = sample_reference_mask(n, rng)
        cond = ReferenceCondition.build(s.images, m)
        x_t = forward_diffuse(s.images, t, schedule, eps)
        packed.append(pack_input(x_t, cond.mask_maps, cond.masked_clean))
        set_ids = vocab.encode_batch(s.captions, tk)
        for i in range(n):
            if rng.random() < text_dropout:
                set_ids[i] = vocab.null_ids(tk)
        ids.append(set_ids)
        ts.append(t)
        targets.append(eps)

    pred = model.predict_epsilon(np.stack(packed), np.asarray(ts), np.stack(ids))
    diff = pred - Tensor(np.stack(targets).astype(model.dtype))
    return (diff * diff).mean()
