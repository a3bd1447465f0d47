"""Scene graphs: data model, JSON ingestion, and serialization into token sequences.

A serialized graph is a sequence ``[g, n_1..n_M, e_1..e_N]`` paired with a
structural encoding per row: zero for the graph token, a learnable node
encoding for each node, and ``E_subject - E_object`` for each edge.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EmptyGraphError, FormatError, StructuralError, UnknownCategoryError
from .layers import Linear, Norm, normal_param

MODES = ("full", "node", "edge")


@dataclass(frozen=True)
class Vocab:
    entities: tuple
    predicates: tuple

    def __post_init__(self):
        for kind, names in (("entity", self.entities), ("predicate", self.predicates)):
            if len(set(names)) != len(names):
                raise FormatError(f"duplicate {kind} names in vocabulary")
        object.__setattr__(self, "_entity_index", {n: i for i, n in enumerate(self.entities)})
        object.__setattr__(self, "_predicate_index", {n: i for i, n in enumerate(self.predicates)})

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_index[name]
        except KeyError:
            raise UnknownCategoryError(f"unknown entity category {name!r}") from None

    def predicate_id(self, name: str) -> int:
        try:
            return self._predicate_index[name]
        except KeyError:
            raise UnknownCategoryError(f"unknown predicate category {name!r}") from None

    def to_json(self) -> dict:
        return {"entities": list(self.entities), "predicates": list(self.predicates)}

    @classmethod
    def from_json(cls, doc: dict) -> "Vocab":
        if not isinstance(doc, dict) or "entities" not in doc or "predicates" not in doc:
            raise FormatError('vocab document needs "entities" and "predicates" lists')
        return cls(tuple(doc["entities"]), tuple(doc["predicates"]))


def load_vocab(path: str | os.PathLike) -> Vocab:
    with open(path) as fh:
        return Vocab.from_json(json.load(fh))


@dataclass(frozen=True)
class Node:
    entity_id: int
    bbox: tuple | None = None  # (x, y, w, h), normalized to the image size


@dataclass(frozen=True)
class Edge:
    predicate_id: int
    subject: int
    object: int


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple
    edges: tuple = ()

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def location_bound(self) -> bool:
        return bool(self.nodes) and all(n.bbox is not None for n in self.nodes)

    def location_free(self) -> "SceneGraph":
        return replace(self, nodes=tuple(Node(n.entity_id) for n in self.nodes))

    def validate(self, vocab: Vocab | None = None) -> "SceneGraph":
        if not self.nodes:
            raise EmptyGraphError("scene graph has no nodes")
        boxed = [n.bbox is not None for n in self.nodes]
        if any(boxed) and not all(boxed):
            raise FormatError("scene graph mixes nodes with and without bounding boxes")
        for i, node in enumerate(self.nodes):
            if vocab is not None and not 0 <= node.entity_id < len(vocab.entities):
                raise UnknownCategoryError(f"node {i}: entity id {node.entity_id} outside vocabulary")
            if node.bbox is not None:
                _check_bbox(node.bbox, i)
        m = len(self.nodes)
        for k, edge in enumerate(self.edges):
            if vocab is not None and not 0 <= edge.predicate_id < len(vocab.predicates):
                raise UnknownCategoryError(f"edge {k}: predicate id {edge.predicate_id} outside vocabulary")
            if not (0 <= edge.subject < m and 0 <= edge.object < m):
                raise StructuralError(
                    f"edge {k} connects nodes {edge.subject}->{edge.object} but the graph has {m} nodes"
                )
            if edge.subject == edge.object:
                raise StructuralError(f"edge {k} is a self-relation on node {edge.subject}")
        return self


def _check_bbox(bbox: Sequence[float], index: int) -> None:
    tol = 1e-9
    if len(bbox) != 4 or not all(np.isfinite(v) for v in bbox):
        raise FormatError(f"node {index}: bbox must be four finite numbers, got {bbox!r}")
    x, y, w, h = bbox
    if w <= 0 or h <= 0 or x < -tol or y < -tol or x + w > 1 + tol or y + h > 1 + tol:
        raise FormatError(f"node {index}: bbox {list(bbox)} lies outside the normalized image")


def parse_scene_graph(document: dict, vocab: Vocab) -> SceneGraph:
    """Build a validated SceneGraph from a dataset record, resolving names via ``vocab``."""
    if not isinstance(document, dict):
        raise FormatError("scene graph document must be a JSON object")
    raw_nodes = document.get("nodes")
    raw_edges = document.get("edges", [])
    if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
        raise FormatError('"nodes" and "edges" must be lists')
    nodes = []
    for i, raw in enumerate(raw_nodes):
        if not isinstance(raw, dict) or "label" not in raw:
            raise FormatError(f"node {i} needs a \"label\"")
        bbox = raw.get("bbox")
        if bbox is not None:
            if not isinstance(bbox, list):
                raise FormatError(f"node {i}: bbox must be a list [x, y, w, h]")
            bbox = tuple(float(v) for v in bbox)
        nodes.append(Node(vocab.entity_id(raw["label"]), bbox))
    edges = []
    for k, raw in enumerate(raw_edges):
        try:
            predicate, subject, obj = raw["predicate"], raw["subject"], raw["object"]
        except (KeyError, TypeError):
            raise FormatError(f'edge {k} needs "predicate", "subject" and "object"') from None
        if not isinstance(subject, int) or not isinstance(obj, int) or isinstance(subject, bool):
            raise FormatError(f"edge {k}: subject and object must be integer node indices")
        edges.append(Edge(vocab.predicate_id(predicate), subject, obj))
    return SceneGraph(tuple(nodes), tuple(edges)).validate(vocab)


def graph_to_json(graph: SceneGraph, vocab: Vocab) -> dict:
    nodes = []
    for n in graph.nodes:
        entry = {"label": vocab.entities[n.entity_id]}
        if n.bbox is not None:
            entry["bbox"] = [float(v) for v in n.bbox]
        nodes.append(entry)
    edges = [
        {"predicate": vocab.predicates[e.predicate_id], "subject": e.subject, "object": e.object} for e in graph.edges
    ]
    return {"nodes": nodes, "edges": edges}


@dataclass(frozen=True)
class Record:
    """One dataset line: the parsed graph plus its image reference."""

    image: str
    graph: SceneGraph
    id: str | None = None


def read_dataset(path: str | os.PathLike, vocab: Vocab) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "image" not in doc:
                raise FormatError(f'{path}:{lineno}: record needs an "image" field')
            try:
                graph = parse_scene_graph(doc, vocab)
            except (FormatError, StructuralError, UnknownCategoryError, EmptyGraphError) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from None
            records.append(Record(str(doc["image"]), graph, doc.get("id")))
    return records


# ---------------------------------------------------------------------------
# learnable graph-side parameters
# ---------------------------------------------------------------------------


@dataclass
class BoxEmbedder:
    """4 -> d affine, layer norm, ReLU, d -> d affine (zero-initialized)."""

    first: Linear
    norm: Norm
    second: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "BoxEmbedder":
        return cls(Linear.init(rng, 4, d), Norm.init(d), Linear.init(rng, d, d, zero=True))


@dataclass
class GraphParams:
    entity_embeddings: Tensor
    predicate_embeddings: Tensor
    node_encodings: Tensor
    graph_token: Tensor
    box: BoxEmbedder

    @classmethod
    def init(cls, rng: np.random.Generator, vocab: Vocab, d: int, max_nodes: int = 10) -> "GraphParams":
        if max_nodes < 1:
            raise ConfigError("max_nodes must be at least 1")
        return cls(
            entity_embeddings=normal_param(rng, (len(vocab.entities), d), d),
            predicate_embeddings=normal_param(rng, (len(vocab.predicates), d), d),
            node_encodings=normal_param(rng, (max_nodes, d), d),
            graph_token=normal_param(rng, (d,), d),
            box=BoxEmbedder.init(rng, d),
        )

    @property
    def dim(self) -> int:
        return self.graph_token.shape[0]

    @property
    def max_nodes(self) -> int:
        return self.node_encodings.shape[0]


def embed_box(bbox, box: BoxEmbedder, eps: float = 1e-5) -> Tensor:
    """Map box coordinates [..., 4] to box embeddings [..., d]."""
    hidden = ad.layer_norm(box.first(ad.as_tensor(bbox)), box.norm.gain, box.norm.bias, eps)
    return box.second(ad.relu(hidden))


def edge_encoding(enc_subject, enc_object):
    """Structural encoding of a directed edge: subject encoding minus object encoding."""
    return enc_subject - enc_object


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RestrictedGraph:
    """A graph queried with part of its content withheld ("node" or "edge" mode)."""

    graph: SceneGraph
    mode: str


@dataclass
class GraphSequence:
    tokens: Tensor  # [1 + M' + N', d]
    encodings: Tensor  # same shape; row 0 is zero
    node_order: np.ndarray  # original index of each node row, in sequence order
    node_slots: np.ndarray  # node-encoding index assigned to each node row
    edge_order: np.ndarray  # original index of each edge row
    edge_endpoints: np.ndarray  # [N', 2] (subject, object) as node-row positions
    clipped: tuple = ()
    mode: str = "full"

    def __len__(self) -> int:
        return self.tokens.shape[0]


def serialize(
    graph: SceneGraph | RestrictedGraph,
    params: GraphParams,
    rng: np.random.Generator | None = None,
    shuffle: bool = False,
    mode: str = "full",
    eps: float = 1e-5,
) -> GraphSequence:
    """Turn a scene graph into tokens and structural encodings.

    Graphs with more nodes than ``params.max_nodes`` keep a uniform random
    subset (edges touching dropped nodes go too).  With ``shuffle`` the node
    encodings are assigned through a random permutation.  Clipping without an
    ``rng`` uses a fixed seed so evaluation stays reproducible.
    """
    if isinstance(graph, RestrictedGraph):
        graph, mode = graph.graph, graph.mode
    if mode not in MODES:
        raise ConfigError(f"unknown serialization mode {mode!r}; expected one of {MODES}")
    if not graph.nodes:
        raise EmptyGraphError("cannot serialize an empty scene graph")
    if shuffle and rng is None:
        raise ConfigError("node shuffle needs a random generator")

    m, cap = graph.num_nodes, params.max_nodes
    clipped: tuple = ()
    if m > cap:
        sampler = rng if rng is not None else np.random.default_rng(0)
        kept = np.sort(sampler.choice(m, size=cap, replace=False))
        clipped = tuple(int(i) for i in np.setdiff1d(np.arange(m), kept))
    else:
        kept = np.arange(m)
    position = {int(orig): pos for pos, orig in enumerate(kept)}
    edge_order = np.array(
        [k for k, e in enumerate(graph.edges) if e.subject in position and e.object in position], dtype=np.int64
    )
    endpoints = np.array(
        [(position[graph.edges[k].subject], position[graph.edges[k].object]) for k in edge_order], dtype=np.int64
    ).reshape(-1, 2)
    slots = rng.permutation(len(kept)) if shuffle else np.arange(len(kept))

    d = params.dim
    nodes = [graph.nodes[i] for i in kept]
    node_tokens = ad.take(params.entity_embeddings, [n.entity_id for n in nodes])
    if graph.location_bound:
        boxes = np.array([n.bbox for n in nodes], dtype=np.float64)
        node_tokens = node_tokens + embed_box(boxes, params.box, eps)
    edge_tokens = ad.take(params.predicate_embeddings, [graph.edges[k].predicate_id for k in edge_order])
    head = params.graph_token.reshape(1, d)

    if mode == "full":
        node_enc = ad.take(params.node_encodings, slots)
        edge_enc = edge_encoding(
            ad.take(params.node_encodings, slots[endpoints[:, 0]]),
            ad.take(params.node_encodings, slots[endpoints[:, 1]]),
        )
        tokens = ad.concat([head, node_tokens, edge_tokens])
        encodings = ad.concat([ad.Tensor(np.zeros((1, d))), node_enc, edge_enc])
    elif mode == "node":
        tokens = ad.concat([head, node_tokens])
        encodings = ad.Tensor(np.zeros(tokens.shape))
    else:
        if len(edge_order) == 0:
            raise StructuralError("edge-only query on a graph without edges")
        tokens = ad.concat([head, edge_tokens])
        encodings = ad.Tensor(np.zeros(tokens.shape))
    return GraphSequence(
        tokens=tokens,
        encodings=encodings,
        node_order=kept.astype(np.int64),
        node_slots=np.asarray(slots, dtype=np.int64),
        edge_order=edge_order,
        edge_endpoints=endpoints,
        clipped=clipped,
        mode=mode,
    )
