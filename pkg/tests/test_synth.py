import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gicon.errors import DataError
from gicon.scene_graph import Node, load_vocab, read_dataset
from gicon.synth import (
    BACKGROUND,
    RULES,
    SynthVocab,
    generate_graph,
    generate_samples,
    make_dataset,
    predicate_holds,
    render,
    split_samples,
)

VOCAB = SynthVocab()


def test_rules():
    a, b = (0.0, 0.0, 0.2, 0.2), (0.5, 0.5, 0.3, 0.3)
    assert RULES["left of"](a, b) and not RULES["left of"](b, a)
    assert RULES["above"](a, b)
    assert RULES["inside"]((0.55, 0.55, 0.1, 0.1), b)
    assert RULES["overlapping"]((0.1, 0.1, 0.5, 0.5), b)
    assert not RULES["overlapping"]((0.55, 0.55, 0.1, 0.1), b)


def test_single_triplet():
    g = generate_graph(np.random.default_rng(0), VOCAB, node_range=(2, 2), edge_range=(1, 1))
    assert (g.num_nodes, g.num_edges) == (2, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_label_soundness_and_determinism(seed):
    g = generate_graph(np.random.default_rng(seed), VOCAB)
    assert g.location_bound
    for e in g.edges:
        assert predicate_holds(VOCAB.predicates[e.predicate_id], g.nodes[e.subject].bbox, g.nodes[e.object].bbox)
    assert generate_graph(np.random.default_rng(seed), VOCAB) == g


def test_budget_exhaustion():
    with pytest.raises(DataError):
        generate_graph(np.random.default_rng(0), VOCAB, node_range=(1, 1), edge_range=(1, 1), budget=5)


def test_render_background_and_determinism():
    g = generate_graph(np.random.default_rng(1), VOCAB)
    img = render(g, VOCAB, 64)
    centers = (np.arange(64) + 0.5) / 64
    inside = np.zeros((64, 64), dtype=bool)
    for n in g.nodes:
        x, y, w, h = n.bbox
        inside |= ((centers[:, None] >= y) & (centers[:, None] < y + h)) & ((centers[None, :] >= x) & (centers[None, :] < x + w))
    assert np.all(img[~inside] == BACKGROUND)
    assert np.array_equal(img, render(g, VOCAB, 64))


def test_swapping_categories_changes_only_their_boxes():
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = generate_graph(rng, VOCAB, node_range=(3, 4))
        a, b = g.nodes[0], g.nodes[1]
        if a.entity_id == b.entity_id:
            continue
        swapped = replace(g, nodes=(Node(b.entity_id, a.bbox), Node(a.entity_id, b.bbox)) + g.nodes[2:])
        diff = np.any(render(g) != render(swapped), axis=2)
        centers = (np.arange(64) + 0.5) / 64
        allowed = np.zeros((64, 64), dtype=bool)
        for x, y, w, h in (a.bbox, b.bbox):
            allowed |= ((centers[:, None] >= y) & (centers[:, None] < y + h)) & ((centers[None, :] >= x) & (centers[None, :] < x + w))
        assert diff.any() and not np.any(diff & ~allowed)


def test_render_needs_boxes():
    g = generate_graph(np.random.default_rng(3), VOCAB)
    with pytest.raises(DataError):
        render(g.location_free())


def test_samples_are_distinct_and_valid():
    samples = generate_samples(256, 7)
    assert len({s.id for s in samples}) == 256
    assert len({(s.graph.nodes, s.graph.edges) for s in samples}) == 256
    for s in samples:
        s.graph.validate(VOCAB.vocab())
    hashes = {hashlib.sha256(s.image.tobytes()).hexdigest() for s in samples}
    assert len(hashes) == 256


def test_split_is_a_fixed_tail():
    samples = generate_samples(20, 1, image_size=16)
    train, gallery = split_samples(samples, 0.25)
    assert (len(train), len(gallery)) == (15, 5)
    assert [s.id for s in train + gallery] == [s.id for s in samples]


def test_make_dataset_is_byte_identical(tmp_path):
    def digest(root):
        return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}

    info = make_dataset(16, 7, tmp_path / "a", image_size=32)
    make_dataset(16, 7, tmp_path / "b", image_size=32)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert (info["n_train"], info["n_gallery"]) == (12, 4)
    vocab = load_vocab(info["vocab"])
    records = read_dataset(info["train"], vocab) + read_dataset(info["gallery"], vocab)
    assert len(records) == 16 and all((tmp_path / "a" / "images" / r.image).exists() for r in records)
    first = json.loads((tmp_path / "a" / "train.jsonl").read_text().splitlines()[0])
    assert set(first) == {"id", "image", "nodes", "edges"}
