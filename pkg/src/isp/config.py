"""Flat key = value run configuration.

One ``key = value`` per line, ``#`` starts a comment, blank lines are
ignored, and unknown keys are errors so hyper-parameter typos fail loudly.
The canonical rendering (:meth:`TrainConfig.to_text`) is embedded
verbatim in every checkpoint and results file for provenance; its
sha256 is the config hash reported by evaluation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from hashlib import sha256

from .encoder import EncoderConfig
from .objective import ALPHA_CLIP_MODES
from .pipeline import TEXT_CONTEXT_MODES, parse_isp_layers
from .ssp import RESIDUAL_MODES

TEXT_POOL_MODES = ("last", "mean")


class ConfigError(ValueError):
    """Malformed configuration text or invalid field combination."""


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad seeds list {text!r}") from exc


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs: encoder dimensions, task shape, optimizer
    settings, objective hyper-parameters, and behavior flags."""

    encoder_layers: int = 12
    visual_dim: int = 32
    text_dim: int = 16
    embed_dim: int = 16
    visual_tokens: int = 16
    text_tokens: int = 8
    num_heads: int = 4
    temperature: float = 0.07
    encoder_seed: int = 0
    num_classes: int = 10
    shots: int = 16
    noise_scale: float = 0.75
    test_per_class: int = 16
    visual_prompts: int = 4
    text_prompts: int = 6
    isp_layers: str = "1-12"
    lr: float = 0.025
    epochs: int = 10
    batch_size: int = 16
    gamma: float = 0.3
    beta: float = 10.0
    omega_v: float = 1.0
    omega_t: float = 1.0
    alpha_cap: float = 1.0
    seeds: tuple[int, ...] = (1, 2, 3)
    ssp_residual: str = "tokens"
    alpha_clip: str = "min1"
    csp_text_context: str = "mean_classes"
    text_pool: str = "last"
    run_seed: int = -1  # set by training when a checkpoint is written

    def __post_init__(self):
        try:
            self.encoder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.visual_prompts < 1 or self.visual_prompts > self.visual_tokens:
            raise ConfigError(
                f"visual_prompts={self.visual_prompts} must lie in "
                f"[1, visual_tokens={self.visual_tokens}]")
        if self.text_prompts < 1 or self.text_prompts > self.text_tokens:
            raise ConfigError(
                f"text_prompts={self.text_prompts} must lie in "
                f"[1, text_tokens={self.text_tokens}]")
        try:
            self.active_layers()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("lr", "gamma", "beta", "alpha_cap", "noise_scale",
                     "omega_v", "omega_t"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("epochs", "batch_size", "shots", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.ssp_residual not in RESIDUAL_MODES:
            raise ConfigError(f"ssp_residual must be one of {RESIDUAL_MODES}")
        if self.alpha_clip not in ALPHA_CLIP_MODES:
            raise ConfigError(f"alpha_clip must be one of {ALPHA_CLIP_MODES}")
        if self.csp_text_context not in TEXT_CONTEXT_MODES:
            raise ConfigError(
                f"csp_text_context must be one of {TEXT_CONTEXT_MODES}")
        if self.text_pool not in TEXT_POOL_MODES:
            raise ConfigError(f"text_pool must be one of {TEXT_POOL_MODES}")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.encoder_layers, visual_dim=self.visual_dim,
            text_dim=self.text_dim, embed_dim=self.embed_dim,
            visual_tokens=self.visual_tokens, text_tokens=self.text_tokens,
            num_heads=self.num_heads, temperature=self.temperature,
            seed=self.encoder_seed)

    def active_layers(self) -> tuple[int, ...]:
        return parse_isp_layers(self.isp_layers, self.encoder_layers)

    def with_run_seed(self, seed: int) -> "TrainConfig":
        return dataclasses.replace(self, run_seed=seed)

    def to_text(self) -> str:
        lines = []
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if field.name == "run_seed" and value < 0:
                continue
            lines.append(f"{field.name} = {_fmt(value)}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return sha256(self.to_text().encode()).hexdigest()


_CONVERTERS = {}
for _field in dataclasses.fields(TrainConfig):
    if _field.name == "seeds":
        _CONVERTERS[_field.name] = _parse_seeds
    elif _field.type in ("int", int):
        _CONVERTERS[_field.name] = int
    elif _field.type in ("float", float):
        _CONVERTERS[_field.name] = float
    else:
        _CONVERTERS[_field.name] = str


def parse_config(text: str) -> TrainConfig:
    """Parse flat configuration text; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONVERTERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONVERTERS[key](value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: "
                              f"{value!r}") from exc
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
