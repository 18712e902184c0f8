"""Structured captions over a closed grammar.

Captions take exactly one form:

    a {pattern} {color} {shape} on a {bg_style} {bg_color} background
    a {pattern} {color} {shape} on a {bg_style} {bg_color} background, style {style}

so every caption round-trips through parse() exactly, which is what makes
rule-based text-alignment scoring exact.  Tokenization is plain whitespace
splitting, so the comma form "background," is its own vocabulary word.
"""

from dataclasses import dataclass, replace

from .palette import BACKGROUND_NAMES, FOREGROUND_NAMES
from .styles import STYLE_NAMES

SHAPES = ("circle", "square", "triangle", "star", "cross")
PATTERNS = ("solid", "stripes", "dots")
BG_STYLES = ("solid", "gradient", "stripes", "noise")


@dataclass(frozen=True)
class ToyCaption:
    pattern: str
    color: str
    shape: str
    bg_style: str
    bg_color: str
    style: str | None = None

    def __post_init__(self):
        checks = [(self.pattern, PATTERNS, "pattern"),
                  (self.color, FOREGROUND_NAMES, "color"),
                  (self.shape, SHAPES, "shape"),
                  (self.bg_style, BG_STYLES, "background style"),
                  (self.bg_color, BACKGROUND_NAMES, "background color")]
        for value, allowed, what in checks:
            if value not in allowed:
                raise ValueError(f"unknown {what} {value!r}")
        if self.style is not None and self.style not in STYLE_NAMES:
            raise ValueError(f"unknown style {self.style!r}")

    def to_string(self) -> str:
        text = (f"a {self.pattern} {self.color} {self.shape} on a "
                f"{self.bg_style} {self.bg_color} background")
        if self.style is not None:
            text += f", style {self.style}"
        return text

    def with_style(self, style: str | None) -> "ToyCaption":
        return replace(self, style=style)


def parse(text: str) -> ToyCaption:
    """Invert to_string.  Raises ValueError on anything else."""
    if not isinstance(text, str):
        raise ValueError(f"caption must be a string, got {type(text).__name__}")
    style = None
    body = text
    if ", style " in text:
        body, _, style = text.partition(", style ")
    words = body.split(" ")
    if (len(words) != 9 or words[0] != "a" or words[4] != "on"
            or words[5] != "a" or words[8] != "background"):
        raise ValueError(f"caption does not match the grammar: {text!r}")
    return ToyCaption(pattern=words[1], color=words[2], shape=words[3],
                      bg_style=words[6], bg_color=words[7], style=style)


def grammar_words() -> list[str]:
    """Every whitespace token any caption can contain, sorted."""
    words = {"a", "on", "background", "background,", "style"}
    words.update(PATTERNS)
    words.update(FOREGROUND_NAMES)
    words.update(SHAPES)
    words.update(BG_STYLES)
    words.update(BACKGROUND_NAMES)
    words.update(STYLE_NAMES)
    return sorted(words)


def sample_scene(rng) -> tuple[str, str]:
    """Draw a (background style, background color) pair uniformly."""
    bg_style = BG_STYLES[int(rng.integers(0, len(BG_STYLES)))]
    bg_color = BACKGROUND_NAMES[int(rng.integers(0, len(BACKGROUND_NAMES)))]
    return bg_style, bg_color
