"""Graph tower: encode serialized scene graphs into their graph-token representation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, run_encoder
from .errors import DimensionError
from .scene_graph import GraphSequence


def encode_graph(seq: GraphSequence, params: EncoderParams, cfg: EncoderConfig) -> Tensor:
    """Representation of one graph: the final-layer state of the graph token."""
    if seq.tokens.shape != seq.encodings.shape:
        raise DimensionError(f"tokens {seq.tokens.shape} and encodings {seq.encodings.shape} differ")
    t, d = seq.tokens.shape
    out = run_encoder(seq.tokens.reshape(1, t, d), seq.encodings.reshape(1, t, d), None, params, cfg)
    return out[0, 0]


def encode_graph_batch(
    seqs: Sequence[GraphSequence],
    params: EncoderParams,
    cfg: EncoderConfig,
    filler: float | np.ndarray = 0.0,
) -> Tensor:
    """Encode graphs of different lengths together; returns [B, d].

    Short sequences are padded with ``filler`` rows that are masked out of
    every attention, so each output row matches :func:`encode_graph`.
    """
    if not seqs:
        raise DimensionError("cannot encode an empty batch")
    d = cfg.model_dim
    longest = max(len(s) for s in seqs)
    tokens, encodings = [], []
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for b, seq in enumerate(seqs):
        if seq.tokens.shape != seq.encodings.shape or seq.tokens.shape[1] != d:
            raise DimensionError(f"sequence {b} has tokens {seq.tokens.shape}, encodings {seq.encodings.shape}")
        n = len(seq)
        mask[b, :n] = True
        if n < longest:
            pad = ad.Tensor(np.broadcast_to(filler, (longest - n, d)))
            tokens.append(ad.concat([seq.tokens, pad]))
            encodings.append(ad.concat([seq.encodings, pad]))
        else:
            tokens.append(seq.tokens)
            encodings.append(seq.encodings)
    out = run_encoder(ad.stack(tokens), ad.stack(encodings), mask, params, cfg)
    return out[:, 0]
