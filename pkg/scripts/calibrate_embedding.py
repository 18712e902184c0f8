"""Calibrate the embedding whitening constants and shape centroids.

Renders a corpus of posed sprites through the same paths the harness
sees at run time (collage extraction masks plus augmented images with
re-derived masks), measures the feature distributions, and prints the
constant block that is committed in jointdiff/evalharness.py.  Also
reports the similarity statistics the thresholds rely on:

  - same subject, different poses: masked similarity should clear 0.95
    with margin (the affinity filtering threshold),
  - different base colors: similarity should stay under 0.7,
  - shape detector (nearest whitened centroid) should be exact on clean
    renders.

Run: python3 scripts/calibrate_embedding.py
"""

import itertools
import sys

import numpy as np

sys.path.insert(0, "src")

import jointdiff.evalharness as ev
from jointdiff.toygen.backgrounds import augment_background
from jointdiff.toygen.captions import SHAPES, ToyCaption, sample_scene
from jointdiff.toygen.extract import extract_instances
from jointdiff.toygen.sprites import render_collage, sample_subject
from jointdiff.toygen.styles import apply_style, draw_style

NUM_SUBJECTS = 240
COLLAGES_PER_SUBJECT = 3
SEED = 20240811

BLOCKS = {"hist": slice(0, 64), "moments": slice(64, 71),
          "area": slice(71, 73)}


def render_corpus():
    subjects, instances = [], []
    for s in range(NUM_SUBJECTS):
        rng = np.random.default_rng([SEED, s])
        subject = sample_subject(s, rng)
        subjects.append(subject)
        per_subject = []
        for _ in range(COLLAGES_PER_SUBJECT):
            collage, boxes = render_collage(subject, 3, rng)
            per_subject.append(extract_instances(collage, boxes))
        instances.append(per_subject)
    return subjects, instances


def derived_mask_corpus(subjects, instances):
    """Augmented scenes with masks re-derived the way eval does it."""
    masks = []
    for s_i, per in enumerate(instances):
        rng = np.random.default_rng([SEED, 500 + s_i])
        subject = subjects[s_i]
        for inst in per[0][:2]:
            bg_style, bg_color = sample_scene(rng)
            img, _ = augment_background(inst.image, inst.mask, bg_style,
                                        bg_color, 32, rng)
            caption = ToyCaption(pattern=subject.pattern,
                                 color=subject.base_color,
                                 shape=subject.shape, bg_style=bg_style,
                                 bg_color=bg_color)
            masks.append((s_i, ev.derive_mask(img, caption)))
    return masks


def block_cosines(u, v):
    out = {}
    for name, sl in BLOCKS.items():
        a, b = u[sl], v[sl]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        out[name] = float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0
    return out


def describe(subject):
    return (f"{subject.pattern} {subject.base_color} {subject.shape} "
            f"(pat {subject.pattern_color}, scale {subject.scale:.2f})")


def fmt(vec):
    return "np.array([" + ", ".join(f"{x:.10g}" for x in vec) + "])"


def main():
    subjects, instances = render_corpus()
    flat = [(s_i, inst) for s_i, per in enumerate(instances)
            for group in per for inst in group]
    print(f"corpus: {len(flat)} instances from {len(subjects)} subjects")
    derived = derived_mask_corpus(subjects, instances)
    derived = [(s_i, m) for s_i, m in derived if m.any()]
    print(f"derived-mask corpus: {len(derived)} masks")

    all_masks = [(s_i, inst.mask) for s_i, inst in flat] + derived

    # A high floor damps near-constant moment dims, whose whitened values
    # would otherwise be pure rasterization noise.
    mom = np.stack([ev.moment_features(m) for _, m in all_masks])
    ev.MOMENT_MEAN = mom.mean(axis=0)
    ev.MOMENT_SCALE = np.maximum(mom.std(axis=0), 0.25)

    # The shape detector whitens by the pooled within-class spread, so
    # dims that are stable inside a shape but differ between shapes get
    # boosted instead of averaged away.
    sf = np.stack([ev.shape_features(m) for _, m in all_masks])
    labels_sf = np.array([subjects[s_i].shape for s_i, _ in all_masks])
    sf_mean = sf.mean(axis=0)
    pooled = np.zeros(sf.shape[1])
    for name in SHAPES:
        rows = sf[labels_sf == name]
        pooled += ((rows - rows.mean(axis=0)) ** 2).sum(axis=0)
    sf_scale = np.maximum(np.sqrt(pooled / len(sf)), 0.005)
    ev.SHAPE_FEATURE_MEAN = sf_mean
    ev.SHAPE_FEATURE_SCALE = sf_scale

    z = (sf - sf_mean) / sf_scale
    centroids, spreads = {}, {}
    for name in SHAPES:
        rows = np.array([z[i] for i, (s_i, _) in enumerate(all_masks)
                         if subjects[s_i].shape == name])
        centroids[name] = rows.mean(axis=0)
        # Floor keeps tight classes (a circle's radial profile barely
        # varies) from turning into spiky decision regions.
        spreads[name] = np.maximum(rows.std(axis=0), 0.5)
    ev.SHAPE_CENTROIDS = centroids
    ev.SHAPE_CLASS_SPREAD = spreads

    correct = 0
    margins = []
    misses = {}
    n_flat = len(flat)
    by_source = {"extracted": [0, 0], "derived": [0, 0]}
    for i, (s_i, _) in enumerate(all_masks):
        want = subjects[s_i].shape
        names = list(centroids)
        d = np.array([np.linalg.norm((z[i] - centroids[n]) / spreads[n])
                      for n in names])
        got = names[int(np.argmin(d))]
        correct += got == want
        source = "extracted" if i < n_flat else "derived"
        by_source[source][0] += got == want
        by_source[source][1] += 1
        if got != want:
            misses[(want, got, source)] = misses.get((want, got, source), 0) + 1
        own = d[names.index(want)]
        other = np.min([d[j] for j in range(len(names)) if names[j] != want])
        margins.append(other - own)
    print(f"shape accuracy: {correct}/{len(all_masks)}"
          f"  worst margin {min(margins):.3f}")
    for source, (ok, total) in by_source.items():
        print(f"  {source}: {ok}/{total}")
    if misses:
        print("  confusions:", sorted(misses.items(), key=lambda kv: -kv[1]))

    # similarity statistics with the freshly set constants
    vecs = [[[ev.embed_image(inst.image, inst.mask) for inst in group]
             for group in per] for per in instances]

    same = []
    for s_i, per in enumerate(vecs):
        vs = [v for group in per for v in group]
        for a, b in itertools.combinations(vs, 2):
            same.append((ev.cosine(a, b), s_i, a, b))
    sims = np.array([s for s, *_ in same])
    print(f"same-subject sims: min {sims.min():.4f}  "
          f"p1 {np.quantile(sims, 0.01):.4f}  mean {sims.mean():.4f}")
    for sim, s_i, a, b in sorted(same, key=lambda t: t[0])[:6]:
        print(f"  low {sim:.4f}  {describe(subjects[s_i])}  "
              f"blocks {block_cosines(a, b)}")

    cross_color, cross_any = [], []
    firsts = [per[0][0] for per in vecs]
    for i, j in itertools.combinations(range(len(subjects)), 2):
        sim = ev.cosine(firsts[i], firsts[j])
        cross_any.append(sim)
        if subjects[i].base_color != subjects[j].base_color:
            cross_color.append((sim, i, j))
    cc = np.array([s for s, *_ in cross_color])
    print(f"different-base-color sims: max {cc.max():.4f}  "
          f"p99 {np.quantile(cc, 0.99):.4f}  mean {cc.mean():.4f}")
    for sim, i, j in sorted(cross_color, key=lambda t: t[0])[-4:]:
        print(f"  high {sim:.4f}  {describe(subjects[i])}  vs  "
              f"{describe(subjects[j])}  "
              f"blocks {block_cosines(firsts[i], firsts[j])}")
    print(f"all-pairs cross-subject mean {np.mean(cross_any):.4f}")

    # augmented + set-styled instances, the form sets are stored in
    styled = []
    for s_i, per in enumerate(instances[:60]):
        rng = np.random.default_rng([SEED, 1000 + s_i])
        group = per[0]
        style = draw_style(rng)
        pair = []
        for inst in group[:2]:
            bg_style, bg_color = sample_scene(rng)
            img, mask = augment_background(inst.image, inst.mask, bg_style,
                                           bg_color, 32, rng)
            pair.append(ev.embed_image(apply_style(img, style), mask))
        if len(pair) == 2:
            styled.append((ev.cosine(pair[0], pair[1]), s_i, *pair))
    ss = np.array([s for s, *_ in styled])
    print(f"augmented+styled same-subject sims: min {ss.min():.4f}  "
          f"p5 {np.quantile(ss, 0.05):.4f}  mean {ss.mean():.4f}")
    for sim, s_i, a, b in sorted(styled, key=lambda t: t[0])[:5]:
        print(f"  low {sim:.4f}  {describe(subjects[s_i])}  "
              f"blocks {block_cosines(a, b)}")

    print("\n# constants for jointdiff/evalharness.py")
    print(f"MOMENT_MEAN = {fmt(ev.MOMENT_MEAN)}")
    print(f"MOMENT_SCALE = {fmt(ev.MOMENT_SCALE)}")
    print(f"SHAPE_FEATURE_MEAN = {fmt(sf_mean)}")
    print(f"SHAPE_FEATURE_SCALE = {fmt(sf_scale)}")
    print("SHAPE_CENTROIDS = {")
    for name, c in centroids.items():
        print(f"    \"{name}\": {fmt(c)},")
    print("}")
    print("SHAPE_CLASS_SPREAD = {")
    for name, c in spreads.items():
        print(f"    \"{name}\": {fmt(c)},")
    print("}")


if __name__ == "__main__":
    main()
