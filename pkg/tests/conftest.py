import numpy as np
import pytest
from hypothesis import strategies as st

from gicon.encoder import EncoderConfig, EncoderParams
from gicon.scene_graph import Edge, GraphParams, Node, SceneGraph, Vocab

VOCAB = Vocab(("man", "street", "dog", "tree", "car", "hat"), ("on", "near", "has", "behind"))


def random_graph(rng, m=None, n_edges=None, boxes=False, vocab=VOCAB, max_m=8):
    m = int(rng.integers(1, max_m + 1)) if m is None else m
    nodes = []
    for _ in range(m):
        bbox = None
        if boxes:
            w, h = rng.uniform(0.05, 0.5, 2)
            bbox = (float(rng.uniform(0, 1 - w)), float(rng.uniform(0, 1 - h)), float(w), float(h))
        nodes.append(Node(int(rng.integers(len(vocab.entities))), bbox))
    if m < 2:
        return SceneGraph(tuple(nodes))
    n_edges = int(rng.integers(0, 2 * m)) if n_edges is None else n_edges
    edges = []
    for _ in range(n_edges):
        s, o = rng.choice(m, size=2, replace=False)
        edges.append(Edge(int(rng.integers(len(vocab.predicates))), int(s), int(o)))
    return SceneGraph(tuple(nodes), tuple(edges))


@st.composite
def graphs(draw, min_nodes=1, max_nodes=12, boxes=None):
    seed = draw(st.integers(0, 2**32 - 1))
    m = draw(st.integers(min_nodes, max_nodes))
    with_boxes = draw(st.booleans()) if boxes is None else boxes
    return random_graph(np.random.default_rng(seed), m=m, boxes=with_boxes)


@pytest.fixture
def vocab():
    return VOCAB


@pytest.fixture
def graph_params():
    params = GraphParams.init(np.random.default_rng(0), VOCAB, 8, max_nodes=10)
    # nonzero box path so location-bound tokens differ from location-free ones
    params.box.second.weight.data[...] = np.random.default_rng(1).normal(size=(8, 8))
    return params


@pytest.fixture
def encoder():
    cfg = EncoderConfig(layers=2, heads=2, model_dim=8, ffn_dim=16)
    return EncoderParams.init(np.random.default_rng(2), cfg), cfg


_CRITERIA: dict = {}
_ACCEPTANCE_TITLES = {
    1: "gradient oracle suite",
    2: "analytic loss values",
    3: "structural-encoding algebra",
    4: "permutation invariance",
    5: "mask neutrality",
    6: "random-baseline retrieval",
    7: "desk-scale end-to-end",
    8: "determinism",
}


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion; returns ``passed`` for use in an assert."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid for reports in terminalreporter.stats.values() for r in reports if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in _ACCEPTANCE_TITLES.items():
        passed, detail = _CRITERIA.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {n}. {title}: {detail}")
