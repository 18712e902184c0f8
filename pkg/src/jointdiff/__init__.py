"""Joint diffusion over image sets with a procedural sprite benchmark."""

__version__ = "0.1.0"
