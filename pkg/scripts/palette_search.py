"""Search for the sprite and background palettes and the pattern blend.

Every palette color lives on the posterize lattice {0,85,170,255}^3 so the
posterize transform is the identity on pure palette pixels.  Pattern
regions are painted as an opacity-alpha blend of the pattern color over
the base color, so the search also covers alpha and the blended colors.
It maximizes the worst normalized margin over the constraints that the
detectors, the embedding, and the mask-derivation rules rely on:

  - foreground colors stay distinguishable under every style transform
  - background colors stay distinguishable under every style transform
    (their detector works on a mean over jittered pixels, so they need a
    wider berth than foreground colors)
  - foreground vs background distance dominates the worst-case jitter of
    procedural backgrounds (+-52 after gradients) in the identity and
    posterize domains, where foreground masks are re-derived from pixels;
    under the luma-collapsing styles (grayscale, sepia) masks are always
    supplied explicitly, so no constraint is imposed there; blend colors
    are foreground pixels, so the same applies to them
  - foreground colors sit far from the near-white collage background and
    off each other's blend-toward-white segments (anti-aliased sprite
    edges blend toward white at collage time)
  - every blend color occupies a 4x4x4 histogram bin that no pure
    foreground color occupies (hard), so a subject and any recolored twin
    share no histogram mass; bins that collide with the blend's own
    pattern color are only penalized
  - blend colors stay detection-separated from their base under every
    style, survive posterization visibly, and keep their distance from
    other pure colors and the backgrounds

Run: python3 scripts/palette_search.py
The winners are committed in jointdiff/toygen/palette.py.
"""

import itertools
import sys

import numpy as np

sys.path.insert(0, "src")

from jointdiff.toygen.styles import STYLE_NAMES, apply_style

WHITE = np.array([250.0, 250.0, 250.0])

FG_POOLS = {
    "red": [(170, 0, 0), (255, 0, 0), (255, 0, 85)],
    "green": [(0, 170, 0), (0, 255, 0), (0, 255, 85)],
    "blue": [(0, 0, 255), (0, 85, 255), (0, 0, 170)],
    "yellow": [(255, 255, 0), (255, 255, 85)],
    "purple": [(170, 0, 255), (85, 0, 170), (170, 85, 255)],
    "orange": [(255, 170, 0), (255, 85, 0)],
}

BG_POOLS = {
    "teal": [(0, 170, 170), (0, 255, 255)],
    "pink": [(255, 170, 255), (255, 85, 170)],
    "olive": [(85, 85, 0), (170, 170, 0)],
    "gray": [(85, 85, 85), (170, 170, 170)],
    "navy": [(0, 0, 85), (0, 85, 85)],
    "maroon": [(85, 0, 0), (85, 0, 85)],
}

NUM_BG = 4
ALPHAS = (0.55, 0.6, 0.65, 0.7)


def styled(c, styles=STYLE_NAMES):
    """Styled variants of a color (identity first) as float vectors."""
    px = np.array(np.rint(np.asarray(c)), dtype=np.uint8).reshape(1, 1, 3)
    out = [px.reshape(3).astype(np.float64)]
    for name in styles:
        out.append(apply_style(px, name).reshape(3).astype(np.float64))
    return np.stack(out)


def bin3(c):
    v = np.asarray(np.rint(np.asarray(c)), dtype=np.int64)
    return tuple(v >> 6)


def point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def mix_color(base, pattern, alpha):
    return np.rint(alpha * np.asarray(pattern, float)
                   + (1.0 - alpha) * np.asarray(base, float))


def fg_margin(fg, alpha):
    """Normalized margin of the foreground-only constraints, or -inf."""
    worst = np.inf
    fg_s = [styled(c) for c in fg]
    for a, b in itertools.combinations(fg_s, 2):
        worst = min(worst, np.linalg.norm(a - b, axis=1).min() / 25.0)
    for c in fg:
        worst = min(worst, np.linalg.norm(np.asarray(c, float) - WHITE) / 120.0)
    for i, ci in enumerate(fg):
        for j, cj in enumerate(fg):
            if i != j:
                d = point_segment_distance(np.asarray(ci, float),
                                           np.asarray(cj, float), WHITE)
                worst = min(worst, d / 30.0)

    pure_bins = {bin3(c) for c in fg}
    own_collisions = 0
    for bi, base in enumerate(fg):
        for pi, pattern in enumerate(fg):
            if pi == bi:
                continue
            mix = mix_color(base, pattern, alpha)
            mb = bin3(mix)
            if mb in pure_bins and mb != bin3(pattern):
                return -np.inf, own_collisions
            if mb == bin3(pattern):
                own_collisions += 1
            mix_s = styled(mix)
            worst = min(worst,
                        np.linalg.norm(mix_s - fg_s[bi], axis=1).min() / 22.0)
            post = styled(mix, styles=("posterize-4",))[1]
            if np.array_equal(post, styled(base,
                                           styles=("posterize-4",))[1]):
                return -np.inf, own_collisions
            # A blend may drift near a different pure color under a lossy
            # style; the color detector is majority-safe against that, so
            # only reject outright coincidence.
            for qi, q in enumerate(fg):
                if qi != pi:
                    if np.linalg.norm(mix_s - fg_s[qi], axis=1).min() < 3.0:
                        return -np.inf, own_collisions
            worst = min(worst, np.linalg.norm(mix - WHITE) / 100.0)
    return worst, own_collisions


def bg_margin(fg, bg, alpha):
    """Normalized margin of the constraints that involve backgrounds."""
    worst = np.inf
    bg_s = [styled(c) for c in bg]
    for a, b in itertools.combinations(bg_s, 2):
        worst = min(worst, np.linalg.norm(a - b, axis=1).min() / 50.0)
    for b in bg:
        worst = min(worst, np.linalg.norm(np.asarray(b, float) - WHITE) / 60.0)
    bg_id = [styled(c, styles=("posterize-4",)) for c in bg]
    fronts = [styled(c, styles=("posterize-4",)) for c in fg]
    for bi, base in enumerate(fg):
        for pi, pattern in enumerate(fg):
            if pi != bi:
                fronts.append(styled(mix_color(base, pattern, alpha),
                                     styles=("posterize-4",)))
    for a in fronts:
        for b in bg_id:
            worst = min(worst, np.linalg.norm(a - b, axis=1).min() / 90.0)
    return worst


def main():
    fg_names = list(FG_POOLS)
    candidates = []
    for alpha in ALPHAS:
        for fg in itertools.product(*(FG_POOLS[n] for n in fg_names)):
            m, own = fg_margin(fg, alpha)
            if np.isfinite(m):
                candidates.append((m, own, alpha, fg))
    print(f"feasible foreground sets: {len(candidates)}")
    if not candidates:
        return

    best = (-np.inf, None)
    for m_fg, own, alpha, fg in candidates:
        if m_fg <= best[0]:
            continue
        for bg_names in itertools.combinations(BG_POOLS, NUM_BG):
            for bg in itertools.product(*(BG_POOLS[n] for n in bg_names)):
                m = min(m_fg, bg_margin(fg, bg, alpha))
                score = m - 0.02 * own
                if score > best[0]:
                    best = (score, (m, own, alpha,
                                    dict(zip(fg_names, fg)),
                                    dict(zip(bg_names, bg))))
    score, (m, own, alpha, fg, bg) = best
    print(f"worst normalized margin: {m:.3f}  own-pattern bin collisions: "
          f"{own}  alpha: {alpha}")
    print(f"PATTERN_OPACITY = {alpha}")
    print("FOREGROUND_COLORS = {")
    for name, c in fg.items():
        print(f"    \"{name}\": ({c[0]}, {c[1]}, {c[2]}),")
    print("}")
    print("BACKGROUND_COLORS = {")
    for name, c in bg.items():
        print(f"    \"{name}\": ({c[0]}, {c[1]}, {c[2]}),")
    print("}")
    luma = np.array([0.299, 0.587, 0.114])
    for name, c in {**fg, **bg}.items():
        print(f"  {name:8s} {c}  luma {np.dot(luma, c):6.1f}")
    for bi, (bn, base) in enumerate(fg.items()):
        row = []
        for pn, pattern in fg.items():
            if pn != bn:
                mix = mix_color(base, pattern, alpha)
                row.append(f"{pn}->{tuple(int(v) for v in mix)}{bin3(mix)}")
        print(f"  mixes on {bn}: " + "  ".join(row))


if __name__ == "__main__":
    main()
