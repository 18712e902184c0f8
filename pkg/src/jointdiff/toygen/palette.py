"""Color palettes and pixel-classification constants.

All colors live on the posterize lattice {0, 85, 170, 255}^3, so the
posterize-4 transform is the identity on pure palette pixels.  The values
were chosen by scripts/palette_search.py, which maximizes the worst-case
margin of the detector and mask-derivation rules:

  - foreground colors stay >= 25 apart under every style transform,
  - background colors stay >= 50 apart under every style transform,
  - foreground-to-background distance >= 90 in the identity and posterize
    domains (where masks are re-derived from pixels), for pure colors and
    pattern blends alike,
  - foreground colors sit >= 120 from the near-white collage background
    and >= 30 off other colors' blend-toward-white segments,
  - every pattern blend occupies a 4x4x4 histogram bin no pure foreground
    color occupies, stays separated from its base color under every style,
    and survives posterization visibly.
"""

import numpy as np

FOREGROUND_COLORS = {
    "red": (255, 0, 85),
    "green": (0, 255, 0),
    "blue": (0, 0, 170),
    "yellow": (255, 255, 85),
    "purple": (170, 85, 255),
    "orange": (255, 170, 0),
}

BACKGROUND_COLORS = {
    "teal": (0, 170, 170),
    "pink": (255, 170, 255),
    "olive": (85, 85, 0),
    "navy": (0, 0, 85),
}

FOREGROUND_NAMES = tuple(FOREGROUND_COLORS)
BACKGROUND_NAMES = tuple(BACKGROUND_COLORS)

# Plain collage background; anti-aliased sprite edges blend toward it.
COLLAGE_BACKGROUND = (250, 250, 250)

# A collage pixel is foreground when its RGB distance from the collage
# background exceeds this.
EXTRACT_DISTANCE = 40.0

# On an augmented image, a pixel is foreground when its RGB distance from
# the (styled) background base color exceeds this; procedural background
# jitter stays within ~52 of the base by construction.
DERIVED_MASK_DISTANCE = 60.0

# Pattern regions are painted as a fixed blend of the pattern color over
# the base color.  The blend makes the visible pattern hue depend on which
# color is underneath, so a subject and its color-swapped twin occupy
# disjoint histogram bins instead of mirrored ones.
PATTERN_OPACITY = 0.65


def fg_rgb(name: str) -> np.ndarray:
    if name not in FOREGROUND_COLORS:
        raise ValueError(f"unknown foreground color {name!r}")
    return np.array(FOREGROUND_COLORS[name], dtype=np.uint8)


def bg_rgb(name: str) -> np.ndarray:
    if name not in BACKGROUND_COLORS:
        raise ValueError(f"unknown background color {name!r}")
    return np.array(BACKGROUND_COLORS[name], dtype=np.uint8)


def pattern_rgb(base_name: str, pattern_name: str) -> np.ndarray:
    """Integer RGB actually painted for pattern pixels on a base color."""
    if base_name == pattern_name:
        raise ValueError("base and pattern colors must differ")
    base = fg_rgb(base_name).astype(np.float64)
    over = fg_rgb(pattern_name).astype(np.float64)
    mix = PATTERN_OPACITY * over + (1.0 - PATTERN_OPACITY) * base
    return np.rint(mix).astype(np.uint8)


def fg_array() -> np.ndarray:
    """[6,3] float array of foreground colors in name order."""
    return np.array(list(FOREGROUND_COLORS.values()), dtype=np.float64)


def bg_array() -> np.ndarray:
    """[4,3] float array of background colors in name order."""
    return np.array(list(BACKGROUND_COLORS.values()), dtype=np.float64)
