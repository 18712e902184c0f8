"""Run configuration: one JSON document with data, model, train, sample
and eval sections.

Unknown sections or keys are rejected by name, every key has a default,
and the effective document is echoed to run.json next to the artifacts it
produced.
"""

from __future__ import annotations

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields

from .diffusion import GuidanceConfig
from .errors import ConfigError
from .evalharness import SWEEP_SCALES
from .training import TrainConfig
from .unet import MAX_SET_SIZE, DenoiserConfig

RUN_JSON_NAME = "run.json"


@dataclass
class DataConfig:
    """Dataset location and generation knobs."""

    dir: str = "data"
    image_size: int = 32
    threshold: float = 0.95

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigError(f"data.image_size must be at least 8, "
                              f"got {self.image_size}")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError(f"data.threshold must lie in (0, 1], "
                              f"got {self.threshold}")


@dataclass
class ModelConfig:
    """Denoiser architecture; vocab_size 0 means the size of the dataset
    vocabulary."""

    vocab_size: int = 0
    image_size: int = 32
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    attention_resolutions: tuple = (16, 8)
    num_res_blocks: int = 2
    num_heads: int = 2
    text_embed_dim: int = 64
    max_caption_tokens: int = 16
    timestep_embed_dim: int = 64
    max_timesteps: int = 1000

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_resolutions = tuple(self.attention_resolutions)
        if self.vocab_size < 0:
            raise ConfigError(f"model.vocab_size must not be negative, "
                              f"got {self.vocab_size}")
        self.build(vocab_size=max(1, self.vocab_size))

    def build(self, vocab_size: int) -> DenoiserConfig:
        """Materialize the architecture, filling vocab_size if left at 0."""
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["vocab_size"] = self.vocab_size or vocab_size
        return DenoiserConfig(**d)


@dataclass
class SampleConfig:
    """Defaults for generation: stride steps, guidance spec, set size."""

    steps: int = 100
    guidance: str = "joint:3.0"
    n: int = 2

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sample.steps must be at least 1, "
                              f"got {self.steps}")
        if not 1 <= self.n <= MAX_SET_SIZE:
            raise ConfigError(f"sample.n must lie in [1, {MAX_SET_SIZE}], "
                              f"got {self.n}")
        GuidanceConfig.parse(self.guidance)


@dataclass
class EvalConfig:
    """Guidance scales swept by the evaluation report."""

    scales: tuple = SWEEP_SCALES

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales:
            raise ConfigError("eval.scales must not be empty")
        if any(s <= 0 for s in self.scales):
            raise ConfigError(f"eval.scales must be positive, "
                              f"got {list(self.scales)}")


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
             "sample": SampleConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    """The full run document; sections default independently."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.model.image_size != self.data.image_size:
            raise ConfigError(
                f"model.image_size {self.model.image_size} does not match "
                f"data.image_size {self.data.image_size}")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        out = {}
        for name, section in doc.items():
            section_cls = _SECTIONS.get(name)
            if section_cls is None:
                raise ConfigError(f"unknown config section {name!r}")
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(section_cls)}
            for key in section:
                if key not in allowed:
                    raise ConfigError(f"unknown config key {name}.{key}")
            out[name] = section_cls(**section)
        return cls(**out)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}


def load_run_config(path) -> RunConfig:
    """Parse a run.json file; bad JSON is a config error, not an I/O one."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


def write_run_json(config: RunConfig, out_dir) -> str:
    """Echo the effective config next to the artifacts it produced."""
    path = os.path.join(out_dir, RUN_JSON_NAME)
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def default_lines() -> list:
    """One 'section.key = default' line per config key, for help text."""
    lines = []
    for name, section_cls in _SECTIONS.items():
        for f in fields(section_cls):
            if f.default is not MISSING:
                value = f.default
            else:
                value = f.default_factory()
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{name}.{f.name} = {json.dumps(value)}")
    return lines
