"""Global image style transforms used as dataset augmentation.

Every transform maps uint8 RGB to uint8 RGB deterministically, acts on
whole images, and is identified by the tag that gets appended to the
caption.  Posterize rounds each channel to the nearest point of the
4-level lattice {0, 85, 170, 255}, which keeps palette colors (chosen on
that lattice) fixed points of the transform.
"""

import numpy as np

STYLE_NAMES = ("sepia", "invert", "posterize-4", "grayscale")

STYLE_PROBABILITY = 0.5

_SEPIA = np.array([[0.393, 0.769, 0.189],
                   [0.349, 0.686, 0.168],
                   [0.272, 0.534, 0.131]])

_LUMA = np.array([0.299, 0.587, 0.114])


def apply_style(image: np.ndarray, name: str | None) -> np.ndarray:
    """Apply one named transform to an [H,W,3] (or [...,3]) uint8 image."""
    image = np.asarray(image)
    if image.shape[-1] != 3:
        raise ValueError(f"expected a trailing RGB axis, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    if name is None:
        return image.copy()
    if name == "sepia":
        out = image.astype(np.float64) @ _SEPIA.T
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if name == "invert":
        return (255 - image.astype(np.int16)).astype(np.uint8)
    if name == "posterize-4":
        return (np.rint(image.astype(np.float64) / 85.0) * 85.0).astype(np.uint8)
    if name == "grayscale":
        luma = np.clip(np.rint(image.astype(np.float64) @ _LUMA), 0, 255)
        return np.repeat(luma[..., None], 3, axis=-1).astype(np.uint8)
    raise ValueError(f"unknown style {name!r}")


def draw_style(rng: np.random.Generator) -> str | None:
    """Draw a style tag with probability 0.5, None otherwise."""
    if rng.random() >= STYLE_PROBABILITY:
        return None
    return STYLE_NAMES[int(rng.integers(0, len(STYLE_NAMES)))]


def stylize(image: np.ndarray, rng: np.random.Generator):
    """Randomly stylize one image.  Returns (image, tag or None)."""
    tag = draw_style(rng)
    return apply_style(image, tag), tag
