"""Sample records and the on-disk dataset format.

A sample is a same-subject image set: the images are stacked vertically
into one square-width PPM (set size = height / width), the captions share
one UTF-8 text file joined by the separator token, and the foreground
masks are stacked into a companion PPM.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError
from .ppm import read_mask_ppm, read_ppm, write_mask_ppm, write_ppm

SPLIT_TOKEN = "<|split|>"


def sample_basename(sample_id: int) -> str:
    return f"sample_{sample_id:06d}"


@dataclass
class SampleRecord:
    """One stored set: images, captions, masks, and provenance ids."""

    sample_id: int
    subject_id: int
    images: np.ndarray   # uint8 [N,S,S,3]
    captions: list[str]
    masks: np.ndarray    # bool [N,S,S]
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be [N,S,S,3], got {self.images.shape}")
        n, h, w = self.images.shape[:3]
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        if len(self.captions) != n:
            raise ValueError(f"{n} images but {len(self.captions)} captions")
        if self.masks.shape != (n, h, w):
            raise ValueError(f"masks {self.masks.shape} do not match images "
                             f"{self.images.shape}")

    @property
    def n(self) -> int:
        return self.images.shape[0]


def record_paths(out_dir, sample_id: int) -> dict:
    base = os.path.join(out_dir, sample_basename(sample_id))
    return {"image": base + ".ppm", "captions": base + ".txt",
            "mask": base + ".mask.ppm"}


def write_sample(record: SampleRecord, out_dir) -> dict:
    """Write one record; returns its file paths."""
    paths = record_paths(out_dir, record.sample_id)
    n, s = record.n, record.images.shape[1]
    write_ppm(paths["image"], record.images.reshape(n * s, s, 3))
    write_mask_ppm(paths["mask"], record.masks.reshape(n * s, s))
    with open(paths["captions"], "w", encoding="utf-8") as f:
        f.write(SPLIT_TOKEN.join(record.captions))
    return paths


def read_sample(out_dir, sample_id: int, subject_id: int = -1,
                attributes: dict | None = None) -> SampleRecord:
    """Read one record back; the exact inverse of write_sample."""
    paths = record_paths(out_dir, sample_id)
    stacked = read_ppm(paths["image"])
    h, w = stacked.shape[:2]
    if h % w != 0:
        raise FormatError(f"{paths['image']}: height {h} is not a multiple "
                          f"of width {w}")
    n = h // w
    with open(paths["captions"], "r", encoding="utf-8") as f:
        text = f.read()
    captions = text.split(SPLIT_TOKEN)
    if len(captions) != n:
        raise FormatError(f"{paths['captions']}: {len(captions)} captions "
                          f"for a set of {n} images")
    masks = read_mask_ppm(paths["mask"])
    if masks.shape != (h, w):
        raise FormatError(f"{paths['mask']}: mask shape {masks.shape} does "
                          f"not match image {h}x{w}")
    return SampleRecord(sample_id=sample_id, subject_id=subject_id,
                        images=stacked.reshape(n, w, w, 3),
                        captions=captions,
                        masks=masks.reshape(n, w, w),
                        attributes=attributes or {})


MANIFEST_NAME = "manifest.json"


def write_manifest(out_dir, manifest: dict) -> str:
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(out_dir) -> dict:
    path = os.path.join(out_dir, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise FormatError(f"{path}: manifest not found")
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt manifest ({e})")


def load_dataset(out_dir) -> list[SampleRecord]:
    """Read every sample listed in a directory's manifest."""
    manifest = read_manifest(out_dir)
    records = []
    for entry in manifest["samples"]:
        records.append(read_sample(out_dir, entry["id"],
                                   subject_id=entry["subject_id"],
                                   attributes=entry.get("attributes")))
    return records
