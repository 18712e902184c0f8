"""Sprite subjects and collage rendering.

A subject is a flat-colored shape with an optional two-color pattern.
Sprites are rasterized by a pixel-center membership test, so every
painted pixel carries an exact palette color: foreground masks can be
recovered from pixel values alone, and mask area tracks the analytic
shape area to within rasterization noise.  Rendering is
pixel-deterministic for a fixed pose.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from matplotlib.path import Path

from .captions import PATTERNS, SHAPES
from .palette import (COLLAGE_BACKGROUND, FOREGROUND_NAMES, fg_rgb,
                      pattern_rgb)

SCALE_RANGE = (0.4, 0.6)

# Pose jitter inside a collage: instance size is scaled by up to +-15%.
SIZE_JITTER = 0.15

# The widest shape (the square, half-side 0.8) sweeps a radius of
# 0.8*sqrt(2) = 1.13 when rotated, so tiles pad by this factor.
_MAX_SWEEP = 1.16

_SUPERSAMPLE = 1


def _polygon(shape: str) -> Path:
    if shape == "triangle":
        angles = np.deg2rad([90.0, 210.0, 330.0])
        verts = np.column_stack([np.cos(angles), np.sin(angles)])
    elif shape == "star":
        angles = np.deg2rad(90.0 + 36.0 * np.arange(10))
        radii = np.where(np.arange(10) % 2 == 0, 1.0, 0.42)
        verts = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    elif shape == "cross":
        w = 0.30
        verts = np.array([(-w, -1), (w, -1), (w, -w), (1, -w), (1, w), (w, w),
                          (w, 1), (-w, 1), (-w, w), (-1, w), (-1, -w), (-w, -w)])
    else:
        raise ValueError(f"no polygon for shape {shape!r}")
    return Path(verts)


_PATHS = {name: _polygon(name) for name in ("triangle", "star", "cross")}


def _inside_unit(shape: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Membership test for unit-frame coordinates."""
    if shape == "circle":
        return x * x + y * y <= 1.0
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 0.8
    if shape in _PATHS:
        pts = np.column_stack([x.ravel(), y.ravel()])
        return _PATHS[shape].contains_points(pts).reshape(x.shape)
    raise ValueError(f"unknown shape {shape!r}")


def _pattern_mask(pattern: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pattern-color region in the sprite's local frame."""
    if pattern == "solid":
        return np.zeros(x.shape, dtype=bool)
    if pattern == "stripes":
        # wide bands so a stripe stays several pixels across even at the
        # smallest sprite size (thin bands alias into dot-like fragments),
        # phased so one band runs through the center and crosses the core
        # of every shape
        return ((x + 0.165) % 1.0) < 0.33
    if pattern == "dots":
        ux = ((x + 0.36) % 0.72) - 0.36
        uy = ((y + 0.36) % 0.72) - 0.36
        return ux * ux + uy * uy <= 0.24 * 0.24
    raise ValueError(f"unknown pattern {pattern!r}")


@dataclass(frozen=True)
class SpriteSubject:
    """Identity of one sprite: shape, colors, pattern, nominal size."""

    shape: str
    base_color: str
    pattern: str
    pattern_color: str
    scale: float
    subject_id: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        for color in (self.base_color, self.pattern_color):
            if color not in FOREGROUND_NAMES:
                raise ValueError(f"unknown color {color!r}")
        if self.base_color == self.pattern_color:
            raise ValueError("base and pattern colors must differ")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale {self.scale} outside {SCALE_RANGE}")


def sample_subject(subject_id: int, rng: np.random.Generator) -> SpriteSubject:
    """Draw a random subject; pattern color is uniform over the others."""
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
    base = int(rng.integers(0, len(FOREGROUND_NAMES)))
    other = (base + 1 + int(rng.integers(0, len(FOREGROUND_NAMES) - 1))) \
        % len(FOREGROUND_NAMES)
    pattern = PATTERNS[int(rng.integers(0, len(PATTERNS)))]
    scale = float(rng.uniform(*SCALE_RANGE))
    return SpriteSubject(shape=shape, base_color=FOREGROUND_NAMES[base],
                         pattern=pattern, pattern_color=FOREGROUND_NAMES[other],
                         scale=scale, subject_id=subject_id)


def _downsample(grid: np.ndarray, ss: int) -> np.ndarray:
    side = grid.shape[0] // ss
    return grid.reshape(side, ss, side, ss).mean(axis=(1, 3))


def render_sprite(subject: SpriteSubject, size_px: float, rotation_deg: float,
                  background=COLLAGE_BACKGROUND, supersample: int = _SUPERSAMPLE):
    """Rasterize one posed sprite.

    Returns (tile uint8 [T,T,3], coverage float [T,T]); the tile side T
    pads size_px enough that any rotation fits.  At the default
    supersample of 1, coverage is the pixel-center membership test and
    every painted pixel is an exact palette color.
    """
    if size_px < 4.0:
        raise ValueError(f"sprite size {size_px:.1f}px is too small to rasterize")
    radius = size_px / 2.0
    tile = int(np.ceil(size_px * _MAX_SWEEP)) + 2
    ss = supersample
    c = (np.arange(tile * ss) + 0.5) / ss - tile / 2.0
    gy, gx = np.meshgrid(c, c, indexing="ij")
    theta = np.deg2rad(rotation_deg)
    lx = (np.cos(theta) * gx + np.sin(theta) * gy) / radius
    ly = (-np.sin(theta) * gx + np.cos(theta) * gy) / radius
    inside = _inside_unit(subject.shape, lx, ly)
    pattern = inside & _pattern_mask(subject.pattern, lx, ly)

    cov = _downsample(inside.astype(np.float64), ss)
    pat = _downsample(pattern.astype(np.float64), ss)
    base = fg_rgb(subject.base_color).astype(np.float64)
    if subject.pattern == "solid":
        patc = base
    else:
        patc = pattern_rgb(subject.base_color, subject.pattern_color) \
            .astype(np.float64)
    bg = np.asarray(background, dtype=np.float64)
    rgb = (bg * (1.0 - cov)[..., None]
           + base * (cov - pat)[..., None]
           + patc * pat[..., None])
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8), cov


def _overlaps(box, others, gap: int = 1) -> bool:
    y0, x0, y1, x1 = box
    for oy0, ox0, oy1, ox1 in others:
        if y0 < oy1 + gap and oy0 < y1 + gap and x0 < ox1 + gap and ox0 < x1 + gap:
            return True
    return False


def render_collage(subject: SpriteSubject, k: int, rng: np.random.Generator,
                   image_size: int = 32, canvas_scale: float = 2.5):
    """Render k posed instances of one subject on a near-white canvas.

    Returns (canvas uint8 [C,C,3], boxes).  Instances that cannot be
    placed after 100 attempts are skipped with a warning, reducing the
    instance count.
    """
    if not 2 <= k <= 4:
        raise ValueError(f"instance count must be in [2,4], got {k}")
    canvas_size = int(round(image_size * canvas_scale))
    canvas = np.full((canvas_size, canvas_size, 3), COLLAGE_BACKGROUND,
                     dtype=np.uint8)
    boxes = []
    for _ in range(k):
        jitter = float(rng.uniform(1.0 - SIZE_JITTER, 1.0 + SIZE_JITTER))
        rotation = float(rng.uniform(0.0, 360.0))
        size_px = subject.scale * image_size * jitter
        tile_img, _ = render_sprite(subject, size_px, rotation)
        t = tile_img.shape[0]
        if t > canvas_size:
            raise ValueError(f"sprite tile {t}px exceeds canvas {canvas_size}px")
        placed = None
        for _ in range(100):
            y0 = int(rng.integers(0, canvas_size - t + 1))
            x0 = int(rng.integers(0, canvas_size - t + 1))
            box = (y0, x0, y0 + t, x0 + t)
            if not _overlaps(box, boxes):
                placed = box
                break
        if placed is None:
            warnings.warn(f"could not place instance after 100 attempts; "
                          f"rendering {len(boxes)} instead of {k}")
            continue
        y0, x0, y1, x1 = placed
        canvas[y0:y1, x0:x1] = tile_img
        boxes.append(placed)
    return canvas, boxes
