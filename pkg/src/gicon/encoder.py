"""Post-norm Transformer encoder stack with encodings injected into queries and keys.

Both towers run this stack.  The extra encodings (structural encodings for
graphs, 2-D positional encodings for images) are added to the token states only
when forming queries and keys; values and the residual stream see the raw
tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .layers import Linear, Norm


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 32
    ffn_dim: int = 64
    eps: float = 1e-5
    # False adds the encodings to Q/K of the first layer only
    encoding_every_layer: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"encoder needs at least one layer, got {self.layers}")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.ffn_dim < 1 or self.eps <= 0:
            raise ConfigError("ffn_dim must be positive and eps > 0")


@dataclass
class EncoderLayerParams:
    query: Linear
    key: Linear
    value: Linear
    out: Linear
    ffn_in: Linear
    ffn_out: Linear
    norm1: Norm
    norm2: Norm


@dataclass
class EncoderParams:
    layers: list

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: EncoderConfig) -> "EncoderParams":
        d, f = cfg.model_dim, cfg.ffn_dim
        return cls(
            [
                EncoderLayerParams(
                    query=Linear.init(rng, d, d),
                    key=Linear.init(rng, d, d),
                    value=Linear.init(rng, d, d),
                    out=Linear.init(rng, d, d),
                    ffn_in=Linear.init(rng, d, f),
                    ffn_out=Linear.init(rng, f, d),
                    norm1=Norm.init(d),
                    norm2=Norm.init(d),
                )
                for _ in range(cfg.layers)
            ]
        )


def project_qkv(x: Tensor, encodings: Tensor | None, layer: EncoderLayerParams) -> tuple[Tensor, Tensor, Tensor]:
    qk_input = x if encodings is None else x + encodings
    return layer.query(qk_input), layer.key(qk_input), layer.value(x)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def attention(
    x: Tensor,
    encodings: Tensor | None,
    key_mask: np.ndarray | None,
    layer: EncoderLayerParams,
    heads: int,
) -> Tensor:
    """Multi-head self-attention over [B, T, d]; ``key_mask`` is a boolean [B, T]."""
    b, n, d = x.shape
    q, k, v = project_qkv(x, encodings, layer)
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // heads))
    mask = np.ones((b, 1, 1, n), dtype=bool) if key_mask is None else key_mask[:, None, None, :]
    weights = ad.masked_softmax(scores, mask)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return layer.out(mixed)


def encoder_layer(
    x: Tensor,
    encodings: Tensor | None,
    key_mask: np.ndarray | None,
    layer: EncoderLayerParams,
    cfg: EncoderConfig,
) -> Tensor:
    x = ad.layer_norm(x + attention(x, encodings, key_mask, layer, cfg.heads), layer.norm1.gain, layer.norm1.bias, cfg.eps)
    hidden = layer.ffn_out(ad.gelu(layer.ffn_in(x)))
    return ad.layer_norm(x + hidden, layer.norm2.gain, layer.norm2.bias, cfg.eps)


def run_encoder(
    x: Tensor,
    encodings: Tensor | None,
    key_mask: np.ndarray | None,
    params: EncoderParams,
    cfg: EncoderConfig,
) -> Tensor:
    """Run the full stack on [B, T, d] tokens and return the final states."""
    if x.ndim != 3 or x.shape[-1] != cfg.model_dim:
        raise DimensionError(f"encoder expects [B, T, {cfg.model_dim}] tokens, got {x.shape}")
    if encodings is not None and encodings.shape != x.shape:
        raise DimensionError(f"encodings shape {encodings.shape} differs from tokens {x.shape}")
    if key_mask is not None and key_mask.shape != x.shape[:2]:
        raise DimensionError(f"key mask shape {key_mask.shape} differs from {x.shape[:2]}")
    if len(params.layers) != cfg.layers:
        raise DimensionError(f"{len(params.layers)} layer parameter sets for a {cfg.layers}-layer config")
    for i, layer in enumerate(params.layers):
        enc = encodings if (cfg.encoding_every_layer or i == 0) else None
        x = encoder_layer(x, enc, key_mask, layer, cfg)
    return x
