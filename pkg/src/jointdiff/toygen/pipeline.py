"""End-to-end dataset generation: render, filter, augment, store.

Each subject runs on its own rng stream derived from (seed, subject
index), so subjects could be generated in parallel without changing a
single emitted byte.
"""

import os
import warnings

import numpy as np

from ..errors import ConfigError
from ..evalharness import embed_image
from .captions import ToyCaption, grammar_words, sample_scene
from .backgrounds import augment_background
from .extract import extract_instances
from .graph import AffinityGraph
from .records import SPLIT_TOKEN, SampleRecord, write_manifest, write_sample
from .sprites import render_collage, sample_subject
from .styles import apply_style, draw_style

SIMILARITY_THRESHOLD = 0.95


def filter_same_subject(instances, threshold: float = SIMILARITY_THRESHOLD):
    """Group instance indices into same-subject components.

    Builds the affinity graph over instance embeddings and returns its
    connected components.  With more than one instance, singleton
    components are treated as contamination and dropped; a lone
    instance keeps its own component.
    """
    vectors = np.stack([embed_image(inst.image, inst.mask)
                        for inst in instances])
    graph = AffinityGraph.build(vectors, threshold)
    groups = graph.components
    if len(instances) > 1:
        groups = [g for g in groups if len(g) > 1]
    return groups


def _prune_below_threshold(vectors: np.ndarray, threshold: float):
    """Indices whose pairwise similarities all clear the threshold.

    Drops the member with the lowest mean similarity until the worst
    remaining pair is acceptable; augmentation occasionally pushes one
    view's embedding away from its siblings.
    """
    keep = list(range(len(vectors)))
    while len(keep) >= 2:
        sims = vectors[keep] @ vectors[keep].T
        off = sims[~np.eye(len(keep), dtype=bool)]
        if off.min() >= threshold:
            break
        keep.pop(int(np.argmin(sims.mean(axis=1))))
    return keep


def generate_dataset(num_subjects: int, sets_per_subject: int, out_dir,
                     seed: int, image_size: int = 32,
                     threshold: float = SIMILARITY_THRESHOLD) -> dict:
    """Generate a same-subject set corpus under out_dir.

    Every subject renders `sets_per_subject` collages; each collage is
    cut into instances, filtered down to its largest same-subject
    group, re-backgrounded one instance at a time onto fresh scenes,
    and optionally stylized as a set.  Sets whose final pairwise
    similarities cannot meet the threshold with at least two members
    are skipped with a warning.  Returns the manifest, which is also
    written to out_dir as JSON.
    """
    if num_subjects < 1:
        raise ConfigError(f"num_subjects must be >= 1, got {num_subjects}")
    if sets_per_subject < 1:
        raise ConfigError(f"sets_per_subject must be >= 1, "
                          f"got {sets_per_subject}")
    os.makedirs(out_dir, exist_ok=True)
    samples = []
    sample_id = 0
    for subject_index in range(num_subjects):
        rng = np.random.default_rng([seed, subject_index])
        subject = sample_subject(subject_index, rng)
        for _ in range(sets_per_subject):
            k = int(rng.integers(2, 5))
            collage, boxes = render_collage(subject, k, rng, image_size)
            instances = extract_instances(collage, boxes)
            if not instances:
                warnings.warn(f"subject {subject_index}: collage produced "
                              f"no instances; set skipped")
                continue
            groups = filter_same_subject(instances, threshold)
            if not groups:
                warnings.warn(f"subject {subject_index}: no same-subject "
                              f"group survived filtering; set skipped")
                continue
            members = max(groups, key=len)

            images, masks, captions = [], [], []
            for index in sorted(members):
                inst = instances[index]
                bg_style, bg_color = sample_scene(rng)
                image, mask = augment_background(inst.image, inst.mask,
                                                 bg_style, bg_color,
                                                 image_size, rng)
                images.append(image)
                masks.append(mask)
                captions.append(ToyCaption(pattern=subject.pattern,
                                           color=subject.base_color,
                                           shape=subject.shape,
                                           bg_style=bg_style,
                                           bg_color=bg_color))
            style = draw_style(rng)
            images = [apply_style(image, style) for image in images]
            captions = [c.with_style(style) for c in captions]

            vectors = np.stack([embed_image(image, mask)
                                for image, mask in zip(images, masks)])
            keep = _prune_below_threshold(vectors, threshold)
            if len(keep) < 2:
                warnings.warn(f"subject {subject_index}: augmented set "
                              f"fell below the similarity threshold; "
                              f"set skipped")
                continue

            attributes = {"shape": subject.shape,
                          "color": subject.base_color,
                          "pattern": subject.pattern,
                          "pattern_color": subject.pattern_color,
                          "scale": subject.scale}
            record = SampleRecord(
                sample_id=sample_id, subject_id=subject.subject_id,
                images=np.stack([images[i] for i in keep]),
                captions=[captions[i].to_string() for i in keep],
                masks=np.stack([masks[i] for i in keep]),
                attributes=attributes)
            paths = write_sample(record, out_dir)
            samples.append({
                "id": record.sample_id,
                "subject_id": record.subject_id,
                "set_size": record.n,
                "attributes": attributes,
                "captions": record.captions,
                "files": {key: os.path.basename(path)
                          for key, path in paths.items()},
            })
            sample_id += 1
    manifest = {"image_size": image_size, "seed": seed,
                "threshold": threshold, "separator": SPLIT_TOKEN,
                "vocabulary": grammar_words(), "samples": samples}
    write_manifest(out_dir, manifest)
    return manifest
