"""Procedural backgrounds and foreground compositing.

Every background style keeps each pixel within ~52 RGB units of its base
color (gradient offsets +-30 per channel, stripe darkening factor 0.88,
noise +-28 per channel), which is what lets a foreground mask be re-derived
from an augmented image by distance from the declared base color.
"""

import numpy as np

from .captions import BG_STYLES
from .palette import bg_rgb

GRADIENT_SPAN = 30
NOISE_SPAN = 28
STRIPE_FACTOR = 0.88


def render_background(style: str, color_name: str, size: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One [size,size,3] uint8 background of the requested style."""
    if style not in BG_STYLES:
        raise ValueError(f"unknown background style {style!r}")
    base = bg_rgb(color_name).astype(np.float64)
    if style == "solid":
        out = np.broadcast_to(base, (size, size, 3)).copy()
    elif style == "gradient":
        ramp = np.linspace(-GRADIENT_SPAN, GRADIENT_SPAN, size)
        if rng.integers(0, 2):
            ramp = ramp[::-1]
        axis = int(rng.integers(0, 2))
        plane = ramp[:, None] if axis == 0 else ramp[None, :]
        out = base + np.broadcast_to(plane, (size, size))[..., None]
    elif style == "stripes":
        width = int(rng.integers(3, 6))
        axis = int(rng.integers(0, 2))
        idx = (np.arange(size) // width % 2).astype(np.float64)
        dark = np.rint(base * STRIPE_FACTOR)
        plane = np.broadcast_to(idx[:, None] if axis == 0 else idx[None, :],
                                (size, size))
        out = base * (1.0 - plane[..., None]) + dark * plane[..., None]
    else:
        offsets = rng.integers(-NOISE_SPAN, NOISE_SPAN + 1, size=(size, size, 3))
        out = base + offsets
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment_background(instance_image: np.ndarray, instance_mask: np.ndarray,
                       style: str, color_name: str, size: int,
                       rng: np.random.Generator):
    """Paste a foreground cutout at a uniform location over a fresh
    background.  Returns (image uint8 [size,size,3], mask bool)."""
    h, w = instance_mask.shape
    if h > size or w > size:
        raise ValueError(f"instance {h}x{w} does not fit a {size}px canvas")
    canvas = render_background(style, color_name, size, rng)
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y0 + h, x0:x0 + w] = instance_mask
    region = canvas[y0:y0 + h, x0:x0 + w]
    region[instance_mask] = instance_image[instance_mask]
    return canvas, mask
