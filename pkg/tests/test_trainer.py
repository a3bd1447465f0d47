import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gicon import autodiff as ad
from gicon.autodiff import Tensor
from gicon.config import TrainConfig, load_config_file
from gicon.errors import ConfigError, DataError, DimensionError, NumericError
from gicon.gradcheck import toy_config
from gicon.synth import SynthVocab, generate_samples
from gicon.trainer import (
    AdamState,
    AdamW,
    adamw_step,
    contrastive_loss,
    cosine_similarity,
    cosine_similarity_matrix,
    in_batch_accuracy,
    train,
)

embeddings = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(5)), elements=st.floats(-3, 3)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)
)


def loss_from_similarity(sim: np.ndarray, tau: float = 1.0) -> float:
    """Direct transcription of the objective for a given similarity matrix."""
    b = len(sim)
    total = 0.0
    for k in range(b):
        total += math.log(math.exp(sim[k, k] / tau) / sum(math.exp(sim[k, j] / tau) for j in range(b)))
        total += math.log(math.exp(sim[k, k] / tau) / sum(math.exp(sim[j, k] / tau) for j in range(b)))
    return -total / b


# -- cosine similarity -------------------------------------------------------------------


def test_cosine_examples():
    g = np.array([1.0, 2.0, -0.5])
    assert cosine_similarity(g, g).item() == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]).item() == 0.0
    i = np.array([0.3, -1.0, 2.0])
    assert cosine_similarity(-g, i).item() == pytest.approx(-cosine_similarity(g, i).item(), abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(NumericError):
        cosine_similarity(np.zeros(3), np.ones(3))


@settings(max_examples=50)
@given(embeddings, st.floats(0.01, 100))
def test_similarity_matrix_bounds_and_scale_invariance(g, alpha):
    sim = cosine_similarity_matrix(g, g[::-1]).data
    assert np.all(np.abs(sim) <= 1 + 1e-12)
    np.testing.assert_allclose(cosine_similarity_matrix(alpha * g, g[::-1]).data, sim, atol=1e-12)


# -- loss ------------------------------------------------------------------------------------


def test_single_pair_loss_is_zero():
    assert contrastive_loss(np.array([[0.3, -1.0]]), np.array([[2.0, 0.1]])).item() == 0.0


@pytest.mark.parametrize("b", [2, 8, 32])
def test_identical_embeddings_give_two_log_b(b):
    e = np.tile(np.random.default_rng(b).normal(size=4), (b, 1))
    assert abs(contrastive_loss(e, e).item() - 2 * math.log(b)) < 1e-9


def test_two_pair_closed_form():
    g = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert abs(contrastive_loss(g, g).item() - 2 * math.log(1 + math.exp(-2))) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.sampled_from([1.0, 0.5, 0.07]))
def test_loss_matches_transcription(seed, b, tau):
    rng = np.random.default_rng(seed)
    g, i = rng.normal(size=(2, b, 6))
    sim = cosine_similarity_matrix(g, i).data
    assert contrastive_loss(g, i, tau).item() == pytest.approx(loss_from_similarity(sim, tau), rel=1e-10, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9), st.sampled_from([1.0, 0.2]))
def test_loss_bounds_and_batch_order_symmetry(seed, b, tau):
    rng = np.random.default_rng(seed)
    g, i = rng.normal(size=(2, b, 6))
    loss = contrastive_loss(g, i, tau).item()
    sim = cosine_similarity_matrix(g, i).data
    assert loss <= 2 * math.log(b) + 2 * (sim.max() - sim.min()) / tau + 1e-12
    perm = rng.permutation(b)
    assert abs(contrastive_loss(g[perm], i[perm], tau).item() - loss) < 1e-12


def test_loss_errors():
    with pytest.raises(DimensionError):
        contrastive_loss(np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(DimensionError):
        contrastive_loss(np.ones((0, 3)), np.ones((0, 3)))
    with pytest.raises(NumericError):
        contrastive_loss(np.ones((2, 3)), np.ones((2, 3)), temperature=0.0)


def test_loss_gradient():
    from gicon.gradcheck import compare

    rng = np.random.default_rng(0)
    g, i = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(4, 5)))
    errors = compare(lambda: contrastive_loss(g, i, 0.3), {"g": g, "i": i})
    assert max(errors.values()) < 1e-6


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_in_batch_ranking_is_scale_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    g, i = rng.normal(size=(2, 6, 4))
    a = in_batch_accuracy(cosine_similarity_matrix(g, i).data)
    assert a == in_batch_accuracy(cosine_similarity_matrix(alpha * g, i).data)


def test_in_batch_accuracy_ties_fail():
    assert in_batch_accuracy(np.array([[1.0, 1.0], [0.0, 1.0]])) == 0.5
    assert in_batch_accuracy(np.eye(4)) == 1.0


# -- AdamW -------------------------------------------------------------------------------------


def test_zero_gradient_no_decay_is_identity():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_decoupled_decay_one_step():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


@pytest.mark.parametrize("c", [1e-3, 0.5, 40.0, -3.0])
def test_constant_gradient_unit_step(c):
    p = {"w": Tensor(np.zeros(3))}
    state = AdamState()
    lr = 0.01
    for _ in range(2000):
        before = p["w"].data.copy()
        adamw_step(p, {"w": np.full(3, c)}, state, lr)
    step = np.abs(p["w"].data - before)
    assert np.all(np.abs(step - lr) < 0.05 * lr)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(1)
    grads = rng.normal(size=(5, 4))
    p = {"w": Tensor(np.ones(4))}
    state = AdamState()
    w, m, v = np.ones(4), np.zeros(4), np.zeros(4)
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    for t, g in enumerate(grads, 1):
        adamw_step(p, {"w": g}, state, lr, (b1, b2), eps, wd)
        w = w * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-14)


def test_non_finite_gradient_names_parameter():
    p = {"encoder.w": Tensor(np.ones(2))}
    with pytest.raises(NumericError, match="encoder.w"):
        adamw_step(p, {"encoder.w": np.array([1.0, np.inf])}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["encoder.w"].data, [1.0, 1.0])


def test_optimizer_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = AdamW({"x": x}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        with ad.recording() as tape:
            loss = ((x - 1.0) * (x - 1.0)).sum()
        tape.backward(loss)
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-3)


# -- config ----------------------------------------------------------------------------------


def test_config_round_trip_and_validation(tmp_path):
    cfg = TrainConfig(temperature=0.1, stem_channels=(8, 8, 8))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        TrainConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 3}))
    assert load_config_file(path) == {"epochs": 3}


def test_full_scale_preset():
    cfg = TrainConfig.paper()
    assert (cfg.d_model, cfg.graph_layers, cfg.batch_size, cfg.max_nodes, cfg.image_longest_side) == (512, 6, 32, 10, 512)
    assert cfg.learning_rate == 1e-4 and cfg.temperature == 1.0


# -- training loop --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    samples = generate_samples(12, 3, image_size=16)
    return [s.graph for s in samples], [s.image for s in samples], SynthVocab().vocab()


def test_zero_learning_rate_keeps_loss_constant(tiny_data):
    graphs, images, vocab = tiny_data
    cfg = toy_config(batch_size=12, epochs=4, learning_rate=0.0, shuffle_nodes=False)
    losses = [e["loss"] for e in train(cfg, graphs, images, vocab).log]
    assert len(losses) == 4 and max(losses) - min(losses) < 1e-12


def test_training_is_deterministic_and_logs(tiny_data, tmp_path):
    graphs, images, vocab = tiny_data
    cfg = toy_config(batch_size=4, epochs=2, checkpoint_every=1)
    a = train(cfg, graphs, images, vocab, out_dir=tmp_path / "a")
    b = train(cfg, graphs, images, vocab, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    assert len(a.log) == 2 * 3
    assert set(a.log[0]) == {"step", "epoch", "loss", "in_batch_acc"}
    assert (tmp_path / "a" / "checkpoint_epoch002.json").exists()
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.model.parameters().values(), b.model.parameters().values()))


def test_remainder_batch_is_dropped(tiny_data):
    graphs, images, vocab = tiny_data
    log = train(toy_config(batch_size=5, epochs=1), graphs, images, vocab).log
    assert len(log) == 2


def test_training_reduces_loss(tiny_data):
    graphs, images, vocab = tiny_data
    cfg = toy_config(batch_size=4, epochs=15, learning_rate=3e-3, temperature=0.2)
    log = train(cfg, graphs[:8], images[:8], vocab).log
    assert np.mean([e["loss"] for e in log[-4:]]) < np.mean([e["loss"] for e in log[:4]])


def test_dataset_errors(tiny_data):
    graphs, images, vocab = tiny_data
    with pytest.raises(DataError):
        train(toy_config(), graphs, images[:-1], vocab)
    with pytest.raises(DataError):
        train(toy_config(batch_size=4), graphs[:3], images[:3], vocab)


def test_non_finite_loss_keeps_last_good_checkpoint(tiny_data, tmp_path, monkeypatch):
    graphs, images, vocab = tiny_data
    import gicon.trainer as trainer_mod

    real = trainer_mod.contrastive_loss
    calls = {"n": 0}

    def flaky(g, i, t):
        calls["n"] += 1
        out = real(g, i, t)
        return out * np.nan if calls["n"] == 3 else out

    monkeypatch.setattr(trainer_mod, "contrastive_loss", flaky)
    with pytest.raises(NumericError, match="step 3"):
        train(toy_config(batch_size=4, epochs=2), graphs, images, vocab, out_dir=tmp_path)
    assert (tmp_path / "checkpoint_last_good.json").exists()
    assert not (tmp_path / "checkpoint.json").exists()
