"""Similarity matrices and R-Precision: retrieve the matching image among K candidates."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import DataError
from .model import GiconModel, prepare_query
from .scene_graph import RestrictedGraph, SceneGraph
from .trainer import cosine_similarity_matrix

DEFAULT_KS = (10, 50, 100)
CHUNK = 64


def similarity_matrix(graphs: np.ndarray, images: np.ndarray) -> np.ndarray:
    """Raw cosine similarities [Q, M]; no scaling or normalization of the scores."""
    with ad.no_grad():
        return cosine_similarity_matrix(graphs, images).data


def restricted_query(graph: SceneGraph, mode: str) -> RestrictedGraph:
    """Query that keeps only node tokens (``node``) or only edge tokens (``edge``).

    Both views drop structural encodings, so the graph structure is not visible.
    """
    if mode not in ("node", "edge"):
        raise DataError(f"restricted query mode must be 'node' or 'edge', got {mode!r}")
    if mode == "edge" and graph.num_edges == 0:
        raise DataError("edge-only query on a graph without edges")
    return prepare_query(graph, mode)


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class RetrievalTask:
    queries: list  # SceneGraph per query
    gallery: list  # images, [H, W, 3]
    ks: tuple = DEFAULT_KS
    trials: int = 20
    seed: int = 0
    match: list | None = None  # gallery index of each query's image; defaults to identity

    def __post_init__(self):
        if self.match is None:
            self.match = list(range(len(self.queries)))
        if len(self.match) != len(self.queries):
            raise DataError("one ground-truth gallery index is needed per query")
        if any(k < 2 for k in self.ks):
            raise DataError(f"K must be at least 2, got {self.ks}")
        if self.trials < 1:
            raise DataError("trials must be at least 1")
        if any(not 0 <= m < len(self.gallery) for m in self.match):
            raise DataError("a ground-truth index lies outside the gallery")


@dataclass
class KScore:
    k: int
    r_precision: float
    successes: int
    trials: int
    ci95: tuple


@dataclass
class RetrievalReport:
    mode: str
    scores: dict  # K -> KScore
    num_queries: int
    trials_per_query: int
    seed: int
    gallery_size: int
    extra: dict = field(default_factory=dict)

    def __getitem__(self, k: int) -> float:
        return self.scores[k].r_precision

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "num_queries": self.num_queries,
            "trials_per_query": self.trials_per_query,
            "total_trials": self.num_queries * self.trials_per_query,
            "seed": self.seed,
            "gallery_size": self.gallery_size,
            "r_precision": {str(k): s.r_precision for k, s in self.scores.items()},
            "scores": {str(k): {**asdict(s), "ci95": list(s.ci95)} for k, s in self.scores.items()},
            **self.extra,
        }


def r_precision_from_similarity(
    sim: np.ndarray,
    match: Sequence[int],
    ks: Sequence[int] = DEFAULT_KS,
    trials: int = 20,
    seed: int = 0,
    mode: str = "custom",
) -> RetrievalReport:
    """Score retrieval given a [Q, M] similarity matrix.

    For each (query, trial) a generator seeded with (seed, query, trial) orders
    the non-matching gallery items; the first K-1 of them join the match as
    candidates, so candidate sets are nested across K.  A trial succeeds only if
    the match scores strictly higher than every distractor.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n_queries, gallery = sim.shape
    ks = tuple(sorted(int(k) for k in ks))
    if gallery < ks[-1]:
        raise DataError(f"gallery of {gallery} images is smaller than K={ks[-1]}")
    wins = {k: 0 for k in ks}
    for q in range(n_queries):
        m = int(match[q])
        others = np.delete(np.arange(gallery), m)
        target = sim[q, m]
        for t in range(trials):
            rng = np.random.default_rng([seed, q, t])
            drawn = others[rng.choice(len(others), size=ks[-1] - 1, replace=False)]
            # best distractor among the first K-1 draws, for every K at once
            running = np.maximum.accumulate(sim[q, drawn])
            for k in ks:
                if target > running[k - 2]:
                    wins[k] += 1
    total = n_queries * trials
    scores = {k: KScore(k, wins[k] / total, wins[k], total, wilson_interval(wins[k], total)) for k in ks}
    return RetrievalReport(mode, scores, n_queries, trials, seed, gallery)


def embed_gallery(model: GiconModel, images: Sequence[np.ndarray], workers: int = 1) -> np.ndarray:
    """Encode gallery images once in fixed-size chunks (optionally across threads)."""
    chunks = [images[i : i + CHUNK] for i in range(0, len(images), CHUNK)]

    def run(chunk):
        with ad.no_grad():
            return model.embed_images(list(chunk)).data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def embed_queries(model: GiconModel, graphs: Sequence[SceneGraph], mode: str) -> np.ndarray:
    parts = []
    with ad.no_grad():
        for i in range(0, len(graphs), CHUNK):
            parts.append(model.embed_graphs(graphs[i : i + CHUNK], mode=mode).data)
    return np.concatenate(parts)


def r_precision(task: RetrievalTask, model: GiconModel, mode: str | None = None, workers: int = 1) -> RetrievalReport:
    """R-Precision of ``model`` on ``task`` with query graphs viewed in ``mode``."""
    mode = model.config.mode if mode is None else mode
    if len(task.gallery) < max(task.ks):
        raise DataError(f"gallery of {len(task.gallery)} images is smaller than K={max(task.ks)}")
    images = embed_gallery(model, task.gallery, workers)
    queries = embed_queries(model, task.queries, mode)
    report = r_precision_from_similarity(
        similarity_matrix(queries, images), task.match, task.ks, task.trials, task.seed, mode
    )
    report.extra["training_mode"] = model.config.mode
    return report
