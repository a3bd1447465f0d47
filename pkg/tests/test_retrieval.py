import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gicon import autodiff as ad
from gicon.errors import DataError, NumericError
from gicon.gradcheck import toy_config
from gicon.model import GiconModel
from gicon.retrieval import (
    RetrievalTask,
    embed_gallery,
    r_precision,
    r_precision_from_similarity,
    restricted_query,
    similarity_matrix,
    wilson_interval,
)
from gicon.scene_graph import Edge, Node, SceneGraph, serialize
from gicon.synth import SynthVocab, generate_samples
from gicon.trainer import cosine_similarity


@pytest.fixture(scope="module")
def toy():
    samples = generate_samples(24, 5, image_size=16)
    model = GiconModel.init(toy_config(), SynthVocab().vocab(), np.random.default_rng(0))
    return model, samples


def test_similarity_matrix_examples():
    rng = np.random.default_rng(0)
    g, i = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
    np.testing.assert_allclose(np.diag(similarity_matrix(g, g)), 1.0, atol=1e-15)
    sim = similarity_matrix(g, i)
    assert np.all(np.abs(sim) <= 1.0)
    for q in range(4):
        for m in range(5):
            assert abs(sim[q, m] - cosine_similarity(g[q], i[m]).item()) < 1e-12


def test_similarity_rejects_zero_rows():
    with pytest.raises(NumericError):
        similarity_matrix(np.zeros((1, 3)), np.ones((2, 3)))


def test_oracle_similarity_scores_one():
    sim = np.random.default_rng(1).uniform(-1, 0.5, size=(30, 120))
    match = np.random.default_rng(2).permutation(120)[:30]
    sim[np.arange(30), match] = 0.9
    report = r_precision_from_similarity(sim, match, ks=(10, 50, 100), trials=5)
    assert all(report[k] == 1.0 for k in (10, 50, 100))


def test_ties_count_as_failure():
    sim = np.zeros((3, 12))
    assert r_precision_from_similarity(sim, [0, 1, 2], ks=(10,), trials=4)[10] == 0.0


def test_random_baseline_within_binomial_band():
    rng = np.random.default_rng(3)
    queries, gallery = rng.normal(size=(500, 16)), rng.normal(size=(500, 16))
    report = r_precision_from_similarity(similarity_matrix(queries, gallery), np.arange(500), ks=(10, 50), trials=20)
    n = 500 * 20
    for k in (10, 50):
        p = 1 / k
        assert abs(report[k] - p) < 3 * np.sqrt(p * (1 - p) / n)
        lo, hi = report.scores[k].ci95
        assert lo <= report[k] <= hi


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_in_k_and_seeded(seed):
    rng = np.random.default_rng(seed)
    sim = rng.normal(size=(8, 40))
    match = rng.permutation(40)[:8]
    sim[np.arange(8), match] += rng.uniform(0, 2, 8)
    a = r_precision_from_similarity(sim, match, ks=(5, 10, 20, 40), trials=6, seed=seed)
    b = r_precision_from_similarity(sim, match, ks=(40, 20, 10, 5), trials=6, seed=seed)
    scores = [a[k] for k in (5, 10, 20, 40)]
    assert scores == sorted(scores, reverse=True)
    assert a.to_json() == b.to_json()


def test_k_equal_to_gallery_uses_every_image():
    sim = np.random.default_rng(4).normal(size=(5, 10))
    match = np.arange(5)
    exact = np.mean([sim[q, q] > np.delete(sim[q], q).max() for q in range(5)])
    assert r_precision_from_similarity(sim, match, ks=(10,), trials=3)[10] == exact


def test_gallery_smaller_than_k():
    with pytest.raises(DataError):
        r_precision_from_similarity(np.zeros((2, 5)), [0, 1], ks=(10,))
    with pytest.raises(DataError):
        RetrievalTask([SceneGraph((Node(0),))], [np.zeros((4, 4, 3))], ks=(1,))


def test_wilson_interval():
    lo, hi = wilson_interval(50, 100)
    assert (lo, hi) == pytest.approx((0.4038, 0.5962), abs=1e-4)
    assert wilson_interval(0, 10)[0] == pytest.approx(0.0, abs=1e-12)
    assert wilson_interval(10, 10)[1] == pytest.approx(1.0, abs=1e-12)


def test_restricted_queries(toy):
    model = toy[0]
    one_edge = SceneGraph((Node(0), Node(1), Node(2)), (Edge(0, 0, 1),))
    assert len(serialize(restricted_query(one_edge, "node"), model.graph)) == 1 + 3
    assert len(serialize(restricted_query(one_edge, "edge"), model.graph)) == 1 + 1
    with pytest.raises(DataError):
        restricted_query(SceneGraph((Node(0),)), "edge")
    rewired = SceneGraph(one_edge.nodes, (Edge(2, 2, 0), Edge(1, 1, 2)))
    with ad.no_grad():
        a = model.embed_graphs([one_edge], mode="node").data
        b = model.embed_graphs([rewired], mode="node").data
    assert np.array_equal(a, b)


def test_gallery_cache_matches_per_image_encoding(toy):
    model, samples = toy
    images = [s.image for s in samples]
    cached = embed_gallery(model, images, workers=2)
    with ad.no_grad():
        single = np.stack([model.embed_images([img]).data[0] for img in images])
    assert np.max(np.abs(cached - single)) < 1e-12
    assert np.array_equal(cached, embed_gallery(model, images, workers=1))


def test_model_report_is_deterministic(toy):
    model, samples = toy
    task = RetrievalTask([s.graph for s in samples], [s.image for s in samples], ks=(5, 10), trials=3, seed=9)
    a, b = r_precision(task, model, mode="lb"), r_precision(task, model, mode="lb", workers=2)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    doc = a.to_json()
    assert doc["mode"] == "lb" and doc["total_trials"] == 24 * 3
    assert all(0 <= v <= 1 for v in doc["r_precision"].values())
    assert r_precision(task, model, mode="lf").mode == "lf"
