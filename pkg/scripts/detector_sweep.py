"""Exhaustive detector check over the full attribute grid.

Every (shape, base color, pattern, pattern color, scale) combination is
rendered through the real dataset path (collage -> extraction ->
background augmentation -> optional style), then scored against its own
caption.  A correct render of its own caption must score txt_align 1.0
both with the stored extraction mask and, for styles that preserve the
foreground/background color split, with a mask re-derived from the
image.  Any miss is printed; the script exits nonzero if any occur.

Run: python3 scripts/detector_sweep.py
"""

import itertools
import sys

import numpy as np

sys.path.insert(0, "src")

import jointdiff.evalharness as ev
from jointdiff.toygen.backgrounds import augment_background
from jointdiff.toygen.captions import BG_STYLES, SHAPES, ToyCaption
from jointdiff.toygen.extract import extract_instances
from jointdiff.toygen.palette import BACKGROUND_NAMES, FOREGROUND_NAMES
from jointdiff.toygen.sprites import SpriteSubject, render_collage
from jointdiff.toygen.styles import STYLE_NAMES, apply_style

SEED = 20240812
SCALES = (0.40, 0.50, 0.60)

# Styles whose images keep enough color structure to re-derive the mask;
# grayscale and sepia collapse the palette onto one luma axis, so those
# always ship with stored masks.
DERIVABLE = (None, "posterize-4", "invert")


def pattern_combos(base):
    others = [c for c in FOREGROUND_NAMES if c != base]
    yield "solid", others[0]
    for pat in ("stripes", "dots"):
        for pc in others:
            yield pat, pc


def main():
    conditions = itertools.cycle(
        itertools.product(BG_STYLES, BACKGROUND_NAMES, (None,) + STYLE_NAMES))
    failures = 0
    cases = 0
    case_index = 0
    for shape in SHAPES:
        for base in FOREGROUND_NAMES:
            for pattern, pattern_color in pattern_combos(base):
                for scale in SCALES:
                    case_index += 1
                    rng = np.random.default_rng([SEED, case_index])
                    subject = SpriteSubject(shape=shape, base_color=base,
                                            pattern=pattern,
                                            pattern_color=pattern_color,
                                            scale=scale, subject_id=0)
                    collage, boxes = render_collage(subject, 2, rng)
                    inst = extract_instances(collage, boxes)[0]
                    bg_style, bg_color, style = next(conditions)
                    img, mask = augment_background(inst.image, inst.mask,
                                                   bg_style, bg_color, 32, rng)
                    styled = apply_style(img, style)
                    caption = ToyCaption(pattern=pattern, color=base,
                                         shape=shape, bg_style=bg_style,
                                         bg_color=bg_color, style=style)
                    desc = (f"{pattern} {base} {shape} pat={pattern_color} "
                            f"scale={scale} bg={bg_style}/{bg_color} "
                            f"style={style}")
                    runs = [("stored", mask)]
                    if style in DERIVABLE:
                        runs.append(("derived", None))
                    for mask_kind, m in runs:
                        cases += 1
                        score = ev.txt_align(styled, caption, m)
                        if score != 1.0:
                            failures += 1
                            parts = {
                                "bg_style": ev.detect_bg_style(
                                    styled, m if m is not None else
                                    ev.derive_mask(styled, caption)),
                                "bg_color": ev.detect_bg_color(
                                    styled, m if m is not None else
                                    ev.derive_mask(styled, caption),
                                    style),
                            }
                            mm = m if m is not None else \
                                ev.derive_mask(styled, caption)
                            if mm.any():
                                parts["color"] = ev.detect_color(
                                    styled, mm, base, style)
                                parts["pattern"] = ev.detect_pattern(
                                    styled, mm, base, style)
                                parts["shape"] = ev.detect_shape(mm)
                            else:
                                parts["mask"] = "empty"
                            print(f"MISS {score:.2f} [{mask_kind}] {desc}")
                            print(f"     got {parts}")
    print(f"{cases - failures}/{cases} checks exact "
          f"({case_index} rendered cases)")
    if failures:
        sys.exit(1)


if __name__ == "__main__":
    main()
