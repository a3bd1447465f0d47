"""Symmetric contrastive objective, AdamW, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .errors import DataError, DimensionError, NumericError
from .model import GiconModel
from .scene_graph import SceneGraph, Vocab

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


def _unit_rows(x: Tensor) -> Tensor:
    norms = ad.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms.data <= NORM_FLOOR):
        raise NumericError("cosine similarity of a zero-norm vector is undefined")
    return x / norms


def cosine_similarity(g, i) -> Tensor:
    """(g . i) / (|g| |i|) for two vectors."""
    g, i = ad.as_tensor(g), ad.as_tensor(i)
    if g.shape != i.shape or g.ndim != 1:
        raise DimensionError(f"cosine similarity needs two equal-length vectors, got {g.shape} and {i.shape}")
    return (_unit_rows(g) * _unit_rows(i)).sum()


def cosine_similarity_matrix(graphs, images) -> Tensor:
    """[Q, M] cosine similarities between the rows of two embedding matrices."""
    graphs, images = ad.as_tensor(graphs), ad.as_tensor(images)
    if graphs.ndim != 2 or images.ndim != 2 or graphs.shape[1] != images.shape[1]:
        raise DimensionError(f"similarity needs [Q, d] and [M, d], got {graphs.shape} and {images.shape}")
    return _unit_rows(graphs) @ _unit_rows(images).T


def contrastive_loss(graphs, images, temperature: float = 1.0) -> Tensor:
    """Symmetric cross-entropy over in-batch cosine similarities.

    Row k of ``graphs`` is paired with row k of ``images``.  The loss is the sum
    of the graph-to-image and image-to-graph terms, averaged over the batch.
    """
    graphs, images = ad.as_tensor(graphs), ad.as_tensor(images)
    if graphs.shape != images.shape or graphs.ndim != 2:
        raise DimensionError(f"paired embeddings must share a [B, d] shape, got {graphs.shape} and {images.shape}")
    b = graphs.shape[0]
    if b < 1:
        raise DimensionError("contrastive loss needs at least one pair")
    if temperature <= 0:
        raise NumericError("temperature must be positive")
    logits = cosine_similarity_matrix(graphs, images) * (1.0 / temperature)
    matched = ad.log_softmax(logits, axis=1) + ad.log_softmax(logits, axis=0)
    return (matched * np.eye(b)).sum() * (-1.0 / b)


def in_batch_accuracy(similarity: np.ndarray) -> float:
    """Fraction of rows whose diagonal entry strictly beats every other entry."""
    sim = np.asarray(similarity)
    diag = np.diag(sim)
    others = np.where(np.eye(len(sim), dtype=bool), -np.inf, sim)
    return float(np.mean(diag > others.max(axis=1))) if len(sim) > 1 else 1.0


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: GiconModel
    log: list


def batch_loss(
    model: GiconModel, graphs: Sequence[SceneGraph], images, rng: np.random.Generator | None, shuffle: bool
) -> tuple[Tensor, Tensor, Tensor]:
    """Forward pass for one paired batch; returns (loss, graph embeddings, image embeddings)."""
    g = model.embed_graphs(graphs, rng=rng, shuffle=shuffle)
    i = model.embed_images(images)
    return contrastive_loss(g, i, model.config.temperature), g, i


def train(
    config: TrainConfig,
    graphs: Sequence[SceneGraph],
    images: Sequence[np.ndarray],
    vocab: Vocab,
    out_dir: str | os.PathLike | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train both towers on paired (graph, image) samples.

    Each epoch shuffles the pairs, drops the remainder batch, serializes graphs
    with node shuffling (if enabled), and applies one AdamW step per batch.
    With ``out_dir`` the step log goes to ``train_log.jsonl`` and checkpoints
    to ``checkpoint*.json``; on a non-finite loss or gradient the current
    (last good) parameters are written before the error propagates.
    """
    if len(graphs) != len(images):
        raise DataError(f"{len(graphs)} graphs but {len(images)} images")
    if len(graphs) < config.batch_size:
        raise DataError(f"dataset of {len(graphs)} pairs is smaller than one batch of {config.batch_size}")
    init_seq, order_seq, serial_seq = np.random.SeedSequence(config.seed).spawn(3)
    model = GiconModel.init(config, vocab, np.random.default_rng(init_seq))
    order_rng = np.random.default_rng(order_seq)
    serial_rng = np.random.default_rng(serial_seq)
    padded = model.pad_images(images)
    params = model.parameters()
    optimizer = AdamW(params, config.learning_rate, (config.beta1, config.beta2), config.adam_eps, config.weight_decay)

    log: list = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")
    try:
        step = 0
        n_batches = len(graphs) // config.batch_size
        for epoch in range(1, config.epochs + 1):
            order = order_rng.permutation(len(graphs))
            for b in range(n_batches):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                optimizer.zero_grad()
                with ad.recording() as tape:
                    loss, g, i = batch_loss(
                        model, [graphs[k] for k in idx], padded.subset(idx), serial_rng, config.shuffle_nodes
                    )
                if not np.isfinite(loss.item()):
                    _save_last_good(model, out_dir, step)
                    raise NumericError(f"non-finite loss at step {step + 1}")
                tape.backward(loss)
                try:
                    optimizer.step()
                except NumericError:
                    _save_last_good(model, out_dir, step)
                    raise
                step += 1
                with ad.no_grad():
                    acc = in_batch_accuracy(cosine_similarity_matrix(g.data, i.data).data)
                entry = {"step": step, "epoch": epoch, "loss": loss.item(), "in_batch_acc": acc}
                log.append(entry)
                if log_fh is not None:
                    log_fh.write(json.dumps(entry) + "\n")
                if on_step is not None:
                    on_step(entry)
            if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                model.save(os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.json"), step=step, epoch=epoch)
            if log and log[-1]["epoch"] == epoch:
                logger.info("epoch %d loss %.4f acc %.3f", epoch, log[-1]["loss"], log[-1]["in_batch_acc"])
        if out_dir is not None:
            model.save(os.path.join(out_dir, "checkpoint.json"), step=step, epoch=config.epochs)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, log)


def _save_last_good(model: GiconModel, out_dir, step: int) -> None:
    if out_dir is not None:
        model.save(os.path.join(out_dir, "checkpoint_last_good.json"), step=step)
