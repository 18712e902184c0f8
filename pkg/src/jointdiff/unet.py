"""Set-conditioned denoising U-Net.

The network denoises a whole set of related images at once.  Each image slot
carries 7 input channels: a binary unknown-slot mask, the noisy image, and the
mask-complement of the clean reference.  Self-attention layers flatten the
entire set into one token sequence, so every spatial position can attend to
every position of every image in the set; cross-attention layers attend from
each image to its own caption only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError
from .text import NULL_ID

MAX_SET_SIZE = 4


@dataclass
class DenoiserConfig:
    """Architecture hyperparameters for the set denoiser."""

    vocab_size: int
    image_size: int = 32
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    attention_resolutions: tuple = (16, 8)
    num_res_blocks: int = 2
    num_heads: int = 2
    text_embed_dim: int = 64
    max_caption_tokens: int = 16
    timestep_embed_dim: int = 64
    max_timesteps: int = 1000

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_resolutions = tuple(sorted(self.attention_resolutions, reverse=True))
        levels = len(self.channel_multipliers)
        if levels < 1:
            raise ConfigError("channel_multipliers must not be empty")
        if self.image_size % (1 << (levels - 1)) != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by 2**{levels - 1} "
                f"required by {levels} resolution levels")
        ladder = [self.image_size >> i for i in range(levels)]
        for r in self.attention_resolutions:
            if r not in ladder:
                raise ConfigError(f"attention resolution {r} not in resolution ladder {ladder}")
        for mult in self.channel_multipliers:
            if (self.base_channels * mult) % self.num_heads != 0:
                raise ConfigError(
                    f"channels {self.base_channels * mult} not divisible by {self.num_heads} heads")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be at least 1 (the null token)")

    def level_channels(self):
        return [self.base_channels * m for m in self.channel_multipliers]

    def to_dict(self):
        d = self.__dict__.copy()
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Module:
    """Minimal layer container: tracks child modules and Parameters."""

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast all parameters in place (used for high-precision checking)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


class Linear(Module):
    def __init__(self, d_in, d_out, rng, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out)).astype(np.float32)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class Conv3x3(Module):
    def __init__(self, c_in, c_out, rng, stride=1, zero_init=False):
        fan_in = c_in * 9
        if zero_init:
            w = np.zeros((c_out, c_in, 3, 3), dtype=np.float32)
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(c_out, c_in, 3, 3)).astype(np.float32)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride)


class Conv1x1(Module):
    """Pointwise channel projection, used on residual skip paths."""

    def __init__(self, c_in, c_out, rng):
        w = rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(c_in, c_out)).astype(np.float32)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        seq = x.transpose(0, 2, 3, 1).reshape(b * h * w, c)
        out = ad.matmul(seq, self.weight) + self.bias
        return out.reshape(b, h, w, -1).transpose(0, 3, 1, 2)


def norm_groups(channels: int) -> int:
    """Largest group count <= 8 dividing `channels` with groups at least two
    channels wide, so per-channel conditioning shifts survive normalization."""
    groups = math.gcd(channels, 8)
    while groups > 1 and channels // groups < 2:
        groups //= 2
    return groups


class GroupNorm(Module):
    def __init__(self, channels):
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.groups = norm_groups(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.gamma, self.beta, self.groups)


def timestep_embedding(t, dim, dtype=np.float32):
    """Sinusoidal embedding of integer timesteps t [B] -> [B, dim]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb.astype(dtype)


class ResBlock(Module):
    """Two 3x3 convolutions with group norm, SiLU, and a timestep shift."""

    def __init__(self, c_in, c_out, temb_dim, rng):
        self.norm1 = GroupNorm(c_in)
        self.conv1 = Conv3x3(c_in, c_out, rng)
        self.temb_proj = Linear(temb_dim, c_out, rng)
        self.norm2 = GroupNorm(c_out)
        self.conv2 = Conv3x3(c_out, c_out, rng, zero_init=True)
        self.skip = Conv1x1(c_in, c_out, rng) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        shift = self.temb_proj(ad.silu(temb))
        b, c = shift.shape
        h = h + shift.reshape(b, c, 1, 1)
        h = self.conv2(ad.silu(self.norm2(h)))
        base = self.skip(x) if self.skip is not None else x
        return base + h


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, c = x.shape
    return x.reshape(b, length, heads, c // heads).transpose(0, 2, 1, 3).reshape(b * heads, length, c // heads)


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    bh, length, dh = x.shape
    b = bh // heads
    return x.reshape(b, heads, length, dh).transpose(0, 2, 1, 3).reshape(b, length, heads * dh)


class SetSelfAttention(Module):
    """Self-attention whose token sequence spans every image in a set.

    Features arrive as [B*N, C, h, w].  With coupling enabled the sequence for
    each set is all N*h*w positions, so content flows between set members;
    with a set size of 1 (or coupling disabled) this is ordinary per-image
    self-attention with the same weights.
    """

    def __init__(self, channels, heads, rng):
        self.norm = GroupNorm(channels)
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng, zero_init=True)
        self.heads = heads

    def attend(self, seq: Tensor) -> Tensor:
        """Scaled dot-product attention over [B, L, C] sequences."""
        heads = self.heads
        dh = seq.shape[-1] // heads
        q = _split_heads(self.q(seq), heads)
        k = _split_heads(self.k(seq), heads)
        v = _split_heads(self.v(seq), heads)
        scores = ad.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        weights = ad.softmax_last_dim(scores)
        return _merge_heads(ad.matmul(weights, v), heads)

    def __call__(self, x: Tensor, set_size: int, couple: bool = True) -> Tensor:
        bn, c, h, w = x.shape
        if bn % set_size != 0:
            raise ShapeError(f"batch of {bn} images is not divisible by set size {set_size}")
        normed = self.norm(x)
        if couple and set_size > 1:
            b = bn // set_size
            seq = normed.reshape(b, set_size, c, h, w).transpose(0, 1, 3, 4, 2).reshape(b, set_size * h * w, c)
            att = self.out(self.attend(seq))
            att = att.reshape(b, set_size, h, w, c).transpose(0, 1, 4, 2, 3).reshape(bn, c, h, w)
        else:
            seq = normed.transpose(0, 2, 3, 1).reshape(bn, h * w, c)
            att = self.out(self.attend(seq))
            att = att.reshape(bn, h, w, c).transpose(0, 3, 1, 2)
        return x + att


class TextCrossAttention(Module):
    """Each image's positions attend to that image's own caption tokens."""

    def __init__(self, channels, text_dim, heads, rng):
        self.norm = GroupNorm(channels)
        self.q = Linear(channels, channels, rng)
        self.k = Linear(text_dim, channels, rng)
        self.v = Linear(text_dim, channels, rng)
        self.out = Linear(channels, channels, rng, zero_init=True)
        self.heads = heads

    def __call__(self, x: Tensor, text: Tensor, key_mask: np.ndarray) -> Tensor:
        bn, c, h, w = x.shape
        heads = self.heads
        dh = c // heads
        seq = self.norm(x).transpose(0, 2, 3, 1).reshape(bn, h * w, c)
        q = _split_heads(self.q(seq), heads)
        k = _split_heads(self.k(text), heads)
        v = _split_heads(self.v(text), heads)
        additive = np.where(key_mask, 0.0, -1e9).astype(x.dtype)[:, None, :]
        additive = np.repeat(additive, heads, axis=0)
        scores = ad.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        weights = ad.softmax_last_dim(scores, additive_mask=additive)
        att = _merge_heads(ad.matmul(weights, v), heads)
        att = self.out(att).reshape(bn, h, w, c).transpose(0, 3, 1, 2)
        return x + att


class AttentionPair(Module):
    """Set self-attention followed by caption cross-attention."""

    def __init__(self, channels, text_dim, heads, rng):
        self.self_attn = SetSelfAttention(channels, heads, rng)
        self.cross_attn = TextCrossAttention(channels, text_dim, heads, rng)

    def __call__(self, x, set_size, couple, text, key_mask):
        x = self.self_attn(x, set_size, couple)
        return self.cross_attn(x, text, key_mask)


class Downsample(Module):
    def __init__(self, channels, rng):
        self.conv = Conv3x3(channels, channels, rng, stride=2)

    def __call__(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv = Conv3x3(c_in, c_out, rng)

    def __call__(self, x):
        return self.conv(ad.upsample_nearest2x(x))


class EncoderLevel(Module):
    def __init__(self, c_in, c_out, temb_dim, attends, text_dim, heads, rng):
        self.blocks = [ResBlock(c_in if i == 0 else c_out, c_out, temb_dim, rng)
                       for i in range(2)]
        self.attn = [AttentionPair(c_out, text_dim, heads, rng) if attends else None
                     for _ in range(2)]

    def __call__(self, x, temb, set_size, couple, text, key_mask):
        for block, attn in zip(self.blocks, self.attn):
            x = block(x, temb)
            if attn is not None:
                x = attn(x, set_size, couple, text, key_mask)
        return x


class DecoderLevel(Module):
    def __init__(self, c_skip, c_out, temb_dim, attends, text_dim, heads, rng):
        self.blocks = [ResBlock(c_out + c_skip if i == 0 else c_out, c_out, temb_dim, rng)
                       for i in range(2)]
        self.attn = [AttentionPair(c_out, text_dim, heads, rng) if attends else None
                     for _ in range(2)]

    def __call__(self, x, skip, temb, set_size, couple, text, key_mask):
        x = ad.concat([x, skip], axis=1)
        for block, attn in zip(self.blocks, self.attn):
            x = block(x, temb)
            if attn is not None:
                x = attn(x, set_size, couple, text, key_mask)
        return x


class JointDenoiser(Module):
    """Predicts per-slot noise for a packed set of images.

    Set coupling can be switched off through `couple_sets` to ablate the
    cross-image attention while keeping identical weights.
    """

    def __init__(self, config: DenoiserConfig, rng):
        cfg = config
        self.config = cfg
        self.couple_sets = True
        td = cfg.timestep_embed_dim

        self.tok_table = Parameter(
            rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.text_embed_dim)).astype(np.float32))
        self.pos_table = Parameter(
            rng.normal(0.0, 0.02, size=(cfg.max_caption_tokens, cfg.text_embed_dim)).astype(np.float32))
        self.time_mlp1 = Linear(td, td, rng)
        self.time_mlp2 = Linear(td, td, rng)

        chans = cfg.level_channels()
        resolutions = [cfg.image_size >> i for i in range(len(chans))]
        attends = [r in cfg.attention_resolutions for r in resolutions]

        self.conv_in = Conv3x3(7, chans[0], rng)
        self.enc_levels = []
        self.downs = []
        for i, c in enumerate(chans):
            c_in = chans[0] if i == 0 else chans[i - 1]
            self.enc_levels.append(EncoderLevel(c_in, c, td, attends[i],
                                                cfg.text_embed_dim, cfg.num_heads, rng))
            if i < len(chans) - 1:
                self.downs.append(Downsample(c, rng))

        c_mid = chans[-1]
        self.mid_block1 = ResBlock(c_mid, c_mid, td, rng)
        self.mid_attn = AttentionPair(c_mid, cfg.text_embed_dim, cfg.num_heads, rng)
        self.mid_block2 = ResBlock(c_mid, c_mid, td, rng)

        self.dec_levels = []
        self.ups = []
        for i in reversed(range(len(chans))):
            self.dec_levels.append(DecoderLevel(chans[i], chans[i], td, attends[i],
                                                cfg.text_embed_dim, cfg.num_heads, rng))
            if i > 0:
                self.ups.append(Upsample(chans[i], chans[i - 1], rng))

        self.out_norm = GroupNorm(chans[0])
        self.out_conv = Conv3x3(chans[0], 3, rng)

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def embed_text(self, token_ids: np.ndarray):
        """Token ids [B*N, Tk] -> (embedded Tensor [B*N, Tk, D], key mask)."""
        tk = self.config.max_caption_tokens
        if token_ids.ndim != 2 or token_ids.shape[1] != tk:
            raise ShapeError(f"token ids must be [batch, {tk}], got {token_ids.shape}")
        emb = ad.embedding(self.tok_table, token_ids)
        pos = ad.embedding(self.pos_table, np.arange(tk))
        key_mask = token_ids != NULL_ID
        silent = ~key_mask.any(axis=1)
        if silent.any():
            key_mask = key_mask.copy()
            key_mask[silent, 0] = True
        return emb + pos, key_mask

    def predict_epsilon(self, packed: np.ndarray, t: np.ndarray, token_ids: np.ndarray) -> Tensor:
        """Denoise a batch of packed sets.

        packed: [B, N, 7, H, W] float array (mask, noisy, masked-clean).
        t: [B] integer timesteps in [1, max_timesteps], one per set.
        token_ids: [B, N, Tk] caption token ids.
        Returns the predicted noise as a Tensor of shape [B, N, 3, H, W].
        """
        cfg = self.config
        packed = np.asarray(packed)
        if packed.ndim != 5 or packed.shape[2] != 7:
            raise ShapeError(f"packed input must be [B, N, 7, H, W], got {packed.shape}")
        b, n = packed.shape[:2]
        if not 1 <= n <= MAX_SET_SIZE:
            raise ShapeError(f"set size {n} outside [1, {MAX_SET_SIZE}]")
        if packed.shape[3] != cfg.image_size or packed.shape[4] != cfg.image_size:
            raise ShapeError(f"expected {cfg.image_size}x{cfg.image_size} images, got {packed.shape}")
        t = np.asarray(t).reshape(-1)
        if t.shape[0] != b:
            raise ShapeError(f"timestep vector has {t.shape[0]} entries for batch of {b} sets")
        if np.any(t < 1) or np.any(t > cfg.max_timesteps):
            raise ValueError(f"timesteps must lie in [1, {cfg.max_timesteps}]")
        token_ids = np.asarray(token_ids)
        if token_ids.shape[:2] != (b, n):
            raise ShapeError(f"token ids must be [B, N, Tk], got {token_ids.shape}")

        dtype = self.dtype
        x = Tensor(packed.reshape(b * n, 7, *packed.shape[3:]).astype(dtype))
        temb_base = timestep_embedding(t, cfg.timestep_embed_dim, dtype)
        temb_base = np.repeat(temb_base, n, axis=0)
        temb = self.time_mlp2(ad.silu(self.time_mlp1(Tensor(temb_base))))
        text, key_mask = self.embed_text(token_ids.reshape(b * n, -1))

        couple = self.couple_sets
        h = self.conv_in(x)
        skips = []
        for i, level in enumerate(self.enc_levels):
            h = level(h, temb, n, couple, text, key_mask)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h, n, couple, text, key_mask)
        h = self.mid_block2(h, temb)

        for j, level in enumerate(self.dec_levels):
            h = level(h, skips[len(skips) - 1 - j], temb, n, couple, text, key_mask)
            if j < len(self.ups):
                h = self.ups[j](h)

        out = self.out_conv(ad.silu(self.out_norm(h)))
        return out.reshape(b, n, 3, cfg.image_size, cfg.image_size)


def pack_input(x_t: np.ndarray, mask_maps: np.ndarray, masked_clean: np.ndarray) -> np.ndarray:
    """Stack conditioning channels for one set: [mask, noisy, masked-clean].

    x_t: [N, 3, H, W] noisy images; mask_maps: [N, 1, H, W] with 1 marking
    unknown slots; masked_clean: [N, 3, H, W] references already zeroed where
    the mask is 1.  Returns [N, 7, H, W].
    """
    x_t = np.asarray(x_t)
    mask_maps = np.asarray(mask_maps)
    masked_clean = np.asarray(masked_clean)
    if x_t.ndim != 4 or x_t.shape[1] != 3:
        raise ShapeError(f"noisy images must be [N, 3, H, W], got {x_t.shape}")
    if mask_maps.shape != (x_t.shape[0], 1) + x_t.shape[2:]:
        raise ShapeError(f"mask maps shape {mask_maps.shape} does not match images {x_t.shape}")
    if masked_clean.shape != x_t.shape:
        raise ShapeError(f"reference shape {masked_clean.shape} does not match images {x_t.shape}")
    return np.concatenate([mask_maps, x_t, masked_clean], axis=1)
