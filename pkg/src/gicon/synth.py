"""Procedural (scene graph, image) pairs with geometrically decidable predicates.

Entities are colored shapes; every predicate is a rule on two boxes, so each
edge can be re-derived from the bounding boxes and labels are noise-free.
Images are rendered deterministically from the location-bound graph.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .image_encoder import save_image
from .scene_graph import Edge, Node, SceneGraph, Vocab, graph_to_json

BACKGROUND = 128 / 255.0
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (240, 220, 40),
}


def left_of(a, b) -> bool:
    return a[0] + a[2] <= b[0]


def above(a, b) -> bool:
    return a[1] + a[3] <= b[1]


def inside(a, b) -> bool:
    return b[0] <= a[0] and b[1] <= a[1] and a[0] + a[2] <= b[0] + b[2] and a[1] + a[3] <= b[1] + b[3]


def overlapping(a, b) -> bool:
    dx = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    dy = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    return dx > 0 and dy > 0 and not inside(a, b) and not inside(b, a)


RULES = {"left of": left_of, "above": above, "inside": inside, "overlapping": overlapping}


@dataclass(frozen=True)
class SynthVocab:
    shapes: tuple = ("circle", "square", "triangle")
    colors: tuple = ("red", "green", "blue", "yellow")
    predicates: tuple = ("left of", "above", "inside", "overlapping")

    def __post_init__(self):
        unknown = [p for p in self.predicates if p not in RULES]
        if unknown:
            raise DataError(f"predicates without a geometric rule: {unknown}")
        bad_colors = [c for c in self.colors if c not in PALETTE]
        if bad_colors:
            raise DataError(f"colors without a palette entry: {bad_colors}")

    @property
    def entities(self) -> tuple:
        return tuple(f"{c} {s}" for c in self.colors for s in self.shapes)

    def vocab(self) -> Vocab:
        return Vocab(self.entities, tuple(self.predicates))

    def shape_of(self, entity_id: int) -> str:
        return self.shapes[entity_id % len(self.shapes)]

    def rgb_of(self, entity_id: int) -> np.ndarray:
        return np.array(PALETTE[self.colors[entity_id // len(self.shapes)]], dtype=np.float64) / 255.0


def predicate_holds(name: str, subject_box, object_box) -> bool:
    return RULES[name](subject_box, object_box)


def _sample_boxes(rng: np.random.Generator, m: int, inside_prob: float) -> list:
    boxes: list = []
    for _ in range(m):
        box = None
        if boxes and rng.random() < inside_prob:
            host = boxes[rng.integers(len(boxes))]
            if host[2] > 0.25 and host[3] > 0.25:
                w, h = host[2] * rng.uniform(0.4, 0.6), host[3] * rng.uniform(0.4, 0.6)
                box = (host[0] + rng.uniform(0, host[2] - w), host[1] + rng.uniform(0, host[3] - h), w, h)
        if box is None:
            for _ in range(20):
                w, h = rng.uniform(0.18, 0.38, size=2)
                box = (rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h)
                if not any(_intersects(box, other) for other in boxes):
                    break
        boxes.append(tuple(round(float(v), 4) for v in box))
    return boxes


def _intersects(a, b) -> bool:
    return min(a[0] + a[2], b[0] + b[2]) > max(a[0], b[0]) and min(a[1] + a[3], b[1] + b[3]) > max(a[1], b[1])


def generate_graph(
    rng: np.random.Generator,
    vocab: SynthVocab = SynthVocab(),
    node_range: tuple = (2, 4),
    edge_range: tuple = (1, 3),
    inside_prob: float = 0.15,
    budget: int = 100,
) -> SceneGraph:
    """Sample a location-bound graph whose edges all hold for their boxes."""
    lo_n, hi_n = node_range
    lo_e, hi_e = edge_range
    if not (1 <= lo_n <= hi_n and 0 <= lo_e <= hi_e):
        raise DataError(f"invalid ranges: nodes {node_range}, edges {edge_range}")
    n_entities = len(vocab.entities)
    for _ in range(budget):
        m = int(rng.integers(lo_n, hi_n + 1))
        entity_ids = rng.integers(n_entities, size=m)
        boxes = _sample_boxes(rng, m, inside_prob)
        candidates = [
            (p, i, j)
            for i in range(m)
            for j in range(m)
            if i != j
            for p, name in enumerate(vocab.predicates)
            if predicate_holds(name, boxes[i], boxes[j])
        ]
        if len(candidates) < lo_e:
            continue
        k = int(rng.integers(lo_e, min(hi_e, len(candidates)) + 1))
        chosen = sorted(rng.choice(len(candidates), size=k, replace=False))
        edges = tuple(Edge(candidates[c][0], candidates[c][1], candidates[c][2]) for c in chosen)
        nodes = tuple(Node(int(e), b) for e, b in zip(entity_ids, boxes))
        return SceneGraph(nodes, edges).validate(vocab.vocab())
    raise DataError(f"could not sample a graph with {edge_range} edges within {budget} attempts")


def render(graph: SceneGraph, vocab: SynthVocab = SynthVocab(), size: int = 64) -> np.ndarray:
    """Rasterize each entity's shape in its box, larger boxes first, on a grey canvas."""
    if not graph.location_bound:
        raise DataError("rendering needs a location-bound graph")
    img = np.full((size, size, 3), BACKGROUND)
    centers = (np.arange(size) + 0.5) / size
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    order = sorted(range(graph.num_nodes), key=lambda k: (-graph.nodes[k].bbox[2] * graph.nodes[k].bbox[3], k))
    for k in order:
        node = graph.nodes[k]
        x, y, w, h = node.bbox
        u, v = (cx - x) / w, (cy - y) / h
        in_box = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
        shape = vocab.shape_of(node.entity_id)
        if shape == "circle":
            region = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
        elif shape == "triangle":
            region = np.abs(2 * u - 1) <= v
        else:
            region = np.ones_like(in_box)
        img[in_box & region] = vocab.rgb_of(node.entity_id)
    return img


@dataclass(frozen=True)
class SynthSample:
    id: str
    graph: SceneGraph
    image: np.ndarray


def _graph_key(graph: SceneGraph) -> tuple:
    return (graph.nodes, graph.edges)


def generate_samples(
    n: int,
    seed: int,
    vocab: SynthVocab = SynthVocab(),
    image_size: int = 64,
    node_range: tuple = (2, 4),
    edge_range: tuple = (1, 3),
) -> list:
    """``n`` distinct samples; sample k draws from a generator seeded by (seed, k, attempt)."""
    if n < 1:
        raise DataError("need at least one sample")
    seen: set = set()
    samples = []
    for k in range(n):
        for attempt in range(100):
            graph = generate_graph(np.random.default_rng([seed, k, attempt]), vocab, node_range, edge_range)
            if _graph_key(graph) not in seen:
                break
        else:
            raise DataError(f"sample {k}: could not draw a graph distinct from earlier samples")
        seen.add(_graph_key(graph))
        samples.append(SynthSample(f"{k:06d}", graph, render(graph, vocab, image_size)))
    return samples


def split_samples(samples: Sequence[SynthSample], gallery_fraction: float = 0.25) -> tuple[list, list]:
    n_gallery = max(1, int(round(len(samples) * gallery_fraction))) if gallery_fraction > 0 else 0
    cut = len(samples) - n_gallery
    return list(samples[:cut]), list(samples[cut:])


def make_dataset(
    n: int,
    seed: int,
    out_dir: str | os.PathLike,
    vocab: SynthVocab = SynthVocab(),
    image_size: int = 64,
    gallery_fraction: float = 0.25,
    node_range: tuple = (2, 4),
    edge_range: tuple = (1, 3),
) -> dict:
    """Write ``vocab.json``, ``train.jsonl``, ``gallery.jsonl`` and ``images/*.png`` under ``out_dir``."""
    samples = generate_samples(n, seed, vocab, image_size, node_range, edge_range)
    train_set, gallery = split_samples(samples, gallery_fraction)
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    word_vocab = vocab.vocab()
    with open(os.path.join(out_dir, "vocab.json"), "w") as fh:
        json.dump(word_vocab.to_json(), fh, indent=2)
    paths = {}
    for split, items in (("train", train_set), ("gallery", gallery)):
        paths[split] = os.path.join(out_dir, f"{split}.jsonl")
        with open(paths[split], "w") as fh:
            for s in items:
                name = f"{s.id}.png"
                save_image(os.path.join(image_dir, name), s.image)
                record = {"id": s.id, "image": name, **graph_to_json(s.graph, word_vocab)}
                fh.write(json.dumps(record) + "\n")
    return {
        "vocab": os.path.join(out_dir, "vocab.json"),
        "images": image_dir,
        "train": paths["train"],
        "gallery": paths["gallery"],
        "n_train": len(train_set),
        "n_gallery": len(gallery),
    }
