"""The two-tower model: parameters, embedding helpers and checkpoint round-trips."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import Tensor, load_checkpoint, named_parameters, save_checkpoint
from .config import TrainConfig
from .encoder import EncoderParams
from .errors import DataError, FormatError
from .graph_encoder import encode_graph_batch
from .image_encoder import ImageParams, PaddedBatch, encode_image_batch, pad_batch
from .scene_graph import GraphParams, RestrictedGraph, SceneGraph, Vocab, serialize

QUERY_MODES = ("lb", "lf", "node", "edge")


def prepare_query(graph: SceneGraph, mode: str) -> SceneGraph | RestrictedGraph:
    """View of ``graph`` used for a query mode (lb, lf, node, edge)."""
    if mode == "lb":
        if not graph.location_bound:
            raise DataError("location-bound mode needs a bounding box on every node")
        return graph
    if mode == "lf":
        return graph.location_free()
    if mode in ("node", "edge"):
        return RestrictedGraph(graph.location_free(), mode)
    raise DataError(f"unknown query mode {mode!r}; expected one of {QUERY_MODES}")


@dataclass
class GiconModel:
    config: TrainConfig
    vocab: Vocab
    graph: GraphParams
    graph_encoder: EncoderParams
    image: ImageParams
    image_encoder: EncoderParams

    @classmethod
    def init(cls, config: TrainConfig, vocab: Vocab, rng: np.random.Generator | None = None) -> "GiconModel":
        rng = np.random.default_rng(config.seed) if rng is None else rng
        d = config.d_model
        return cls(
            config=config,
            vocab=vocab,
            graph=GraphParams.init(rng, vocab, d, config.max_nodes),
            graph_encoder=EncoderParams.init(rng, config.graph_encoder_config()),
            image=ImageParams.init(rng, config.image_config(), d),
            image_encoder=EncoderParams.init(rng, config.image_encoder_config()),
        )

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for part in ("graph", "graph_encoder", "image", "image_encoder"):
            params.update(named_parameters(getattr(self, part), part))
        return params

    # -- embedding ---------------------------------------------------------

    def serialize_graphs(self, graphs: Sequence, rng=None, shuffle: bool = False, mode: str | None = None) -> list:
        mode = self.config.mode if mode is None else mode
        seqs = []
        for g in graphs:
            # without a generator every graph is clipped with the same fixed seed
            r = np.random.default_rng(self.config.clip_seed) if rng is None else rng
            seqs.append(serialize(prepare_query(g, mode), self.graph, rng=r, shuffle=shuffle, eps=self.config.norm_eps))
        return seqs

    def embed_sequences(self, seqs: Sequence) -> Tensor:
        return encode_graph_batch(seqs, self.graph_encoder, self.config.graph_encoder_config())

    def embed_graphs(self, graphs: Sequence, rng=None, shuffle: bool = False, mode: str | None = None) -> Tensor:
        """[B, d] graph representations; evaluation defaults to no shuffle and a fixed clip seed."""
        return self.embed_sequences(self.serialize_graphs(graphs, rng, shuffle, mode))

    def pad_images(self, images: Sequence[np.ndarray]) -> PaddedBatch:
        return pad_batch(images, self.config.image_config())

    def embed_images(self, batch: PaddedBatch | Sequence[np.ndarray]) -> Tensor:
        if not isinstance(batch, PaddedBatch):
            batch = self.pad_images(batch)
        return encode_image_batch(
            batch, self.image, self.image_encoder, self.config.image_encoder_config(), self.config.image_pos_qk_only
        )

    # -- persistence -------------------------------------------------------

    def save(self, path: str | os.PathLike, **extra) -> None:
        metadata = {
            "config": self.config.to_dict(),
            "vocab": self.vocab.to_json(),
            "code_version": __version__,
            **extra,
        }
        save_checkpoint(path, self.parameters(), metadata)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GiconModel":
        arrays, metadata = load_checkpoint(path)
        try:
            config = TrainConfig.from_dict(metadata["config"])
            vocab = Vocab.from_json(metadata["vocab"])
        except KeyError as exc:
            raise FormatError(f"{path}: checkpoint metadata lacks {exc}") from None
        model = cls.init(config, vocab)
        params = model.parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise FormatError(f"{path}: parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.shape:
                raise FormatError(f"{path}: {name} has shape {arrays[name].shape}, expected {tensor.shape}")
            tensor.data[...] = arrays[name]
        return model
