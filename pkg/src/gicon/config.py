"""Training/model configuration as one flat record (also the config-file schema)."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Any, Mapping

from .encoder import EncoderConfig
from .errors import ConfigError
from .image_encoder import ImageConfig

TRAIN_MODES = ("lb", "lf", "node", "edge")


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; :meth:`paper` gives the full-scale setting.

    ``mode`` picks the graph view used for training and default evaluation:
    location-bound (``lb``), location-free (``lf``), or the restricted
    ``node``/``edge`` views built from location-free graphs.

    The contrastive loss normalizes over the B pairs of a batch.
    """

    seed: int = 0
    batch_size: int = 16
    epochs: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 1.0
    max_nodes: int = 10
    mode: str = "lb"
    shuffle_nodes: bool = True
    d_model: int = 32
    graph_layers: int = 2
    graph_heads: int = 4
    graph_ffn_dim: int = 64
    image_layers: int = 2
    image_heads: int = 4
    image_ffn_dim: int = 64
    norm_eps: float = 1e-5
    encoding_every_layer: bool = True
    image_longest_side: int = 64
    stem_stride: int = 8
    stem_channels: tuple = (16, 32, 32)
    image_pos_qk_only: bool = True
    checkpoint_every: int = 0
    clip_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for in-batch negatives")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.max_nodes < 1:
            raise ConfigError("max_nodes must be at least 1")
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        # build the sub-configs once so bad combinations fail at construction
        self.graph_encoder_config()
        self.image_encoder_config()
        self.image_config()

    @classmethod
    def paper(cls, **overrides: Any) -> "TrainConfig":
        base = dict(
            batch_size=32,
            learning_rate=1e-4,
            d_model=512,
            graph_layers=6,
            graph_heads=8,
            graph_ffn_dim=2048,
            image_layers=6,
            image_heads=8,
            image_ffn_dim=2048,
            image_longest_side=512,
            stem_stride=16,
            stem_channels=(64, 128, 256),
        )
        base.update(overrides)
        return cls(**base)

    def graph_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            self.graph_layers, self.graph_heads, self.d_model, self.graph_ffn_dim, self.norm_eps, self.encoding_every_layer
        )

    def image_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_layers, self.image_heads, self.d_model, self.image_ffn_dim, self.norm_eps, True)

    def image_config(self) -> ImageConfig:
        return ImageConfig(self.image_longest_side, self.stem_stride, self.stem_channels, self.image_pos_qk_only)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["stem_channels"] = list(self.stem_channels)
        return out

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for key, value in values.items():
            default = known[key].default
            try:
                if isinstance(default, bool):
                    if not isinstance(value, bool):
                        raise TypeError
                    coerced[key] = value
                elif isinstance(default, tuple):
                    coerced[key] = tuple(int(v) for v in value)
                elif isinstance(default, int):
                    if isinstance(value, bool) or int(value) != value:
                        raise TypeError
                    coerced[key] = int(value)
                elif isinstance(default, float):
                    coerced[key] = float(value)
                else:
                    coerced[key] = value
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r} has invalid value {value!r}") from None
        return cls(**coerced)


def load_config_file(path: str | os.PathLike) -> dict:
    """Read a flat JSON object of TrainConfig fields (validated later by from_dict)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a flat JSON object")
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; nested keys: {', '.join(nested)}")
    return doc
