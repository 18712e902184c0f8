"""Foreground extraction from rendered collages."""

import warnings
from dataclasses import dataclass

import numpy as np

from .palette import COLLAGE_BACKGROUND, EXTRACT_DISTANCE


@dataclass
class Instance:
    """A tight foreground cutout and its binary mask."""

    image: np.ndarray  # uint8 [h,w,3], background pixels still near-white
    mask: np.ndarray   # bool [h,w]

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask "
                             f"{self.mask.shape} disagree")


def foreground_mask(image: np.ndarray,
                    background=COLLAGE_BACKGROUND,
                    distance: float = EXTRACT_DISTANCE) -> np.ndarray:
    """Pixels whose RGB distance from the background color exceeds the
    threshold."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected [H,W,3], got shape {image.shape}")
    delta = image.astype(np.float64) - np.asarray(background, dtype=np.float64)
    return np.sqrt((delta * delta).sum(axis=2)) > distance


def extract_instances(collage: np.ndarray, boxes) -> list[Instance]:
    """Cut tight foreground instances out of a collage.

    Boxes with empty foreground are dropped with a warning.
    """
    h, w = collage.shape[:2]
    instances = []
    for i, (y0, x0, y1, x1) in enumerate(boxes):
        if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
            raise ValueError(f"box {i} {(y0, x0, y1, x1)} is outside the "
                             f"{h}x{w} collage")
        crop = collage[y0:y1, x0:x1]
        mask = foreground_mask(crop)
        if not mask.any():
            warnings.warn(f"box {i} has no foreground pixels; dropped")
            continue
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        r0, r1 = rows[0], rows[-1] + 1
        c0, c1 = cols[0], cols[-1] + 1
        instances.append(Instance(image=crop[r0:r1, c0:c1].copy(),
                                  mask=mask[r0:r1, c0:c1].copy()))
    return instances
