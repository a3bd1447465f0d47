"""Compare tape gradients with central finite differences, per operation and end to end.

Relative error of a gradient tensor is ``max|a - n| / max(max|a|, max|n|, floor)``
where ``a`` is the analytic gradient and ``n`` the finite-difference estimate.
The floor (1e-5) keeps exactly-zero gradients, such as those of attention key
biases, from dividing finite-difference round-off by zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .encoder import EncoderConfig, EncoderParams, encoder_layer
from .errors import ConfigError
from .model import GiconModel
from .scene_graph import BoxEmbedder, embed_box
from .synth import SynthVocab, generate_samples
from .trainer import contrastive_loss

MAX_CHECK_DIM = 16
MAX_CHECK_BATCH = 4
DEFAULT_TOL = 1e-4
SCALE_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    return float(diff / max(scale, SCALE_FLOOR))


def analytic_grads(f: Callable[[], Tensor], inputs: dict) -> dict:
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    with ad.recording() as tape:
        out = f()
    tape.backward(out)
    return {name: (t.grad if t.grad is not None else np.zeros(t.shape)) for name, t in inputs.items()}


def compare(f: Callable[[], Tensor], inputs: dict, h: float = 1e-5) -> dict:
    """Relative error per named input between tape and finite-difference gradients."""
    analytic = analytic_grads(f, inputs)
    return {name: relative_error(analytic[name], ad.finite_diff_grad(lambda _: f(), t, h)) for name, t in inputs.items()}


def _n(rng, *shape):
    return Tensor(rng.normal(size=shape))


def _op_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar function, inputs) for every differentiable primitive."""
    cases = {}

    a, b = _n(rng, 4, 5), _n(rng, 5, 3)
    w = rng.normal(size=(4, 3))
    cases["matmul"] = (lambda: (ad.matmul(a, b) * w).sum(), {"a": a, "b": b})

    logits = _n(rng, 3, 6)
    mask = rng.random((3, 6)) < 0.6
    mask[:, 0] = True
    w_sm = rng.normal(size=(3, 6))
    cases["masked_softmax"] = (lambda: (ad.masked_softmax(logits, mask) * w_sm).sum(), {"logits": logits})

    x_ls = _n(rng, 3, 5)
    w_ls = rng.normal(size=(3, 5))
    cases["log_softmax"] = (lambda: (ad.log_softmax(x_ls, axis=0) * w_ls).sum(), {"x": x_ls})

    x_ln, gain, bias = _n(rng, 3, 8), _n(rng, 8), _n(rng, 8)
    w_ln = rng.normal(size=(3, 8))
    cases["layer_norm"] = (lambda: (ad.layer_norm(x_ln, gain, bias, 1e-5) * w_ln).sum(), {"x": x_ln, "gain": gain, "bias": bias})

    for name, fn, make in (
        ("gelu", ad.gelu, lambda: _n(rng, 4, 3)),
        ("relu", ad.relu, lambda: Tensor(rng.uniform(0.1, 1.0, (4, 3)) * rng.choice([-1, 1], (4, 3)))),
        ("exp", ad.exp, lambda: _n(rng, 4, 3)),
        ("log", ad.log, lambda: Tensor(rng.uniform(0.5, 2.0, (4, 3)))),
        ("sqrt", ad.sqrt, lambda: Tensor(rng.uniform(0.5, 2.0, (4, 3)))),
    ):
        x = make()
        wx = rng.normal(size=x.shape)
        cases[name] = (lambda fn=fn, x=x, wx=wx: (fn(x) * wx).sum(), {"x": x})

    p, q = _n(rng, 3, 4), Tensor(rng.uniform(0.5, 2.0, (4,)))
    w_ar = rng.normal(size=(3, 4))
    cases["broadcast_arithmetic"] = (lambda: (((p * q - q) / (q + 2.0) + p) * w_ar).sum(), {"p": p, "q": q})

    x_c, w_c, b_c = _n(rng, 2, 6, 6, 3), _n(rng, 3, 3, 3, 4), _n(rng, 4)
    w_co = rng.normal(size=(2, 3, 3, 4))
    cases["conv2d"] = (
        lambda: (ad.conv2d(x_c, w_c, b_c, stride=2, padding=1) * w_co).sum(),
        {"x": x_c, "weight": w_c, "bias": b_c},
    )

    table = _n(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    w_t = rng.normal(size=(4, 3))
    cases["take"] = (lambda: (ad.take(table, idx) * w_t).sum(), {"table": table})

    u, v = _n(rng, 2, 3), _n(rng, 1, 3)
    w_cat = rng.normal(size=(2, 3, 3))
    cases["concat_stack_index"] = (
        lambda: (ad.stack([ad.concat([u, v]), ad.concat([v, u])])[:, 1:] * w_cat[:, :2]).sum()
        + (u.T.reshape(6)[[0, 3, 3]] * 2.0).sum()
        + u.mean(axis=1).sum(),
        {"u": u, "v": v},
    )

    a3, b3, g3, c3 = _n(rng, 3, 4), _n(rng, 4, 4), _n(rng, 4), _n(rng, 4)
    w3 = rng.normal(size=(3, 4))
    cases["matmul_softmax_layernorm"] = (
        lambda: (ad.layer_norm(ad.softmax(ad.matmul(a3, b3)), g3, c3, 1e-5) * w3).sum(),
        {"a": a3, "b": b3, "gain": g3, "bias": c3},
    )

    cfg = EncoderConfig(layers=1, heads=2, model_dim=8, ffn_dim=12)
    layer = EncoderParams.init(rng, cfg).layers[0]
    tokens, enc = _n(rng, 2, 5, 8), _n(rng, 2, 5, 8)
    key_mask = np.ones((2, 5), dtype=bool)
    key_mask[1, 3:] = False
    w_enc = rng.normal(size=(2, 5, 8))
    cases["encoder_layer"] = (
        lambda: (encoder_layer(tokens, enc, key_mask, layer, cfg) * w_enc).sum(),
        {"tokens": tokens, "encodings": enc, **ad.named_parameters(layer, "layer")},
    )

    box = BoxEmbedder.init(rng, 8)
    box.second.weight.data[...] = rng.normal(size=box.second.weight.shape) * 0.3
    boxes = Tensor(rng.uniform(0.05, 0.5, (3, 4)))
    w_box = rng.normal(size=(3, 8))
    cases["embed_box"] = (lambda: (embed_box(boxes, box) * w_box).sum(), {"bbox": boxes, **ad.named_parameters(box, "box")})
    return cases


@dataclass
class CheckResult:
    name: str
    worst: float
    per_input: dict
    passed: bool


@dataclass
class GradcheckReport:
    operations: list = field(default_factory=list)
    full_loss: list = field(default_factory=list)
    tolerance: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.operations + self.full_loss)

    def failures(self) -> list:
        return [r.name for r in self.operations + self.full_loss if not r.passed]

    def to_json(self) -> dict:
        def rows(results):
            return [{"name": r.name, "worst_rel_error": r.worst, "passed": r.passed} for r in results]

        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "operations": rows(self.operations),
            "full_loss": rows(self.full_loss),
        }


def check_operations(seed: int = 0, tol: float = DEFAULT_TOL, h: float = 1e-5) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name, (f, inputs) in _op_cases(rng).items():
        errors = compare(f, inputs, h)
        worst = max(errors.values())
        results.append(CheckResult(name, worst, errors, worst < tol))
    return results


def toy_config(**overrides) -> TrainConfig:
    base = dict(
        d_model=8,
        graph_layers=2,
        image_layers=2,
        graph_heads=2,
        image_heads=2,
        graph_ffn_dim=12,
        image_ffn_dim=12,
        image_longest_side=16,
        stem_stride=8,
        stem_channels=(3, 4, 4),
        batch_size=3,
        max_nodes=4,
    )
    base.update(overrides)
    return TrainConfig(**base)


def full_loss_case(config: TrainConfig, batch: int = 3, seed: int = 0):
    """(loss closure, model) on a synthetic batch; the closure is deterministic."""
    if config.d_model > MAX_CHECK_DIM or batch > MAX_CHECK_BATCH:
        raise ConfigError(
            f"finite differences over every parameter are only run at d <= {MAX_CHECK_DIM} and B <= {MAX_CHECK_BATCH}; "
            f"got d={config.d_model}, B={batch}. Shrink d_model/batch for gradcheck."
        )
    vocab = SynthVocab()
    samples = generate_samples(batch, seed, vocab, image_size=config.image_longest_side, node_range=(2, 5), edge_range=(1, 3))
    model = GiconModel.init(config, vocab.vocab(), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters().values():
        # break the zero init of the box embedder's last layer so its whole path is exercised
        if not p.data.any():
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    graphs = [s.graph for s in samples]
    images = model.pad_images([s.image for s in samples])

    def loss() -> Tensor:
        g = model.embed_graphs(graphs, rng=np.random.default_rng(seed), shuffle=config.shuffle_nodes)
        return contrastive_loss(g, model.embed_images(images), config.temperature)

    return loss, model


def check_full_loss(config: TrainConfig, batch: int = 3, seed: int = 0, tol: float = DEFAULT_TOL, h: float = 1e-5) -> list:
    """One result per parameter group (top-level tower part), each listing every parameter tensor."""
    loss, model = full_loss_case(config, batch, seed)
    errors = compare(loss, model.parameters(), h)
    groups: dict = {}
    for name, err in errors.items():
        groups.setdefault(name.split(".")[0], {})[name] = err
    return [CheckResult(f"full_loss:{g}", max(errs.values()), errs, max(errs.values()) < tol) for g, errs in groups.items()]


def run_gradcheck(config: TrainConfig | None = None, batch: int = 3, seed: int = 0, tol: float = DEFAULT_TOL) -> GradcheckReport:
    config = toy_config() if config is None else config
    if config.d_model > MAX_CHECK_DIM or batch > MAX_CHECK_BATCH:
        full_loss_case(config, batch, seed)  # raises the guidance error
    return GradcheckReport(check_operations(seed, tol), check_full_loss(config, batch, seed, tol), tol)
