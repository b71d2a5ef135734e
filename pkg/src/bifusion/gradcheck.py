"""Finite-difference verification of every backward rule and of the full
models.

Each registry entry builds a deterministic scalar loss from seeded inputs;
the analytic gradient from one taped backward pass is compared against
central differences (h = 1e-5) over every parameter scalar.  The worst
relative error per entry is reported; anything at or above 1e-4 is a failure.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .attention import MultiHeadAttention, additive_key_mask, attention_weights
from .bilinear import BilinearFusion, orthogonality_loss, pair_mask
from .config import FusionConfig
from .models import build_model
from .synthetic import one_hot
from .tensor import Tape, Tensor, backward, parameter

TOLERANCE = 1e-4
STEP = 1e-5

TINY_MODEL = FusionConfig(
    d_v=8, d_q=8, d_m=4, d_hid=8, d_joint=8, heads=2, glimpses=2,
    coattention_layers=1, answers=3)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


def check_gradients(build_loss: Callable[[], Tensor], params: list,
                    h: float = STEP) -> float:
    """Worst relative error between taped gradients and central differences.

    ``build_loss`` must be a pure function of the current parameter values.
    """
    tape = Tape()
    with tape:
        loss = build_loss()
        backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = build_loss().item()
            flat[i] = orig - h
            f_minus = build_loss().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = relative_error(analytic.reshape(-1)[i], numeric)
            if err > worst:
                worst = err
        p.zero_grad()
    return worst


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce to a scalar through a fixed random functional so every output
    entry carries a distinct cotangent."""
    c = Tensor(rng.normal(size=out.shape))
    return T.tsum(T.mul(out, c))


def _rng(seed):
    return np.random.default_rng(seed)


# --- registry entry factories ----------------------------------------------

def _f_matmul():
    rng = _rng(10)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4, 5)))
    return (lambda: _weighted_sum(T.matmul(a, b), _rng(11))), [a, b]


def _f_add():
    rng = _rng(12)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(1, 3)))
    return (lambda: _weighted_sum(T.add(a, b), _rng(13))), [a, b]


def _f_sub():
    rng = _rng(14)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(2, 3)))
    return (lambda: _weighted_sum(T.sub(a, b), _rng(15))), [a, b]


def _f_mul():
    rng = _rng(16)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(3,)))
    return (lambda: _weighted_sum(T.mul(a, b), _rng(17))), [a, b]


def _f_div():
    rng = _rng(18)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.uniform(0.5, 2.0, size=(2, 3)))
    return (lambda: _weighted_sum(T.div(a, b), _rng(19))), [a, b]


def _f_scale():
    rng = _rng(20)
    a = parameter(rng.normal(size=(2, 3)))
    return (lambda: _weighted_sum(T.add(T.mul(a, 1.7), 0.3), _rng(21))), [a]


def _f_transpose():
    rng = _rng(22)
    a = parameter(rng.normal(size=(3, 4)))
    return (lambda: _weighted_sum(T.transpose(a), _rng(23))), [a]


def _f_reshape():
    rng = _rng(24)
    a = parameter(rng.normal(size=(3, 4)))
    return (lambda: _weighted_sum(T.reshape(a, (2, 6)), _rng(25))), [a]


def _f_concat():
    rng = _rng(26)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(2, 2)))
    return (lambda: _weighted_sum(T.concat([a, b], axis=-1), _rng(27))), [a, b]


def _f_narrow():
    rng = _rng(28)
    a = parameter(rng.normal(size=(3, 6)))
    return (lambda: _weighted_sum(T.narrow(a, -1, 2, 3), _rng(29))), [a]


def _f_relu():
    rng = _rng(30)
    # keep pre-activations away from the kink so central differences are valid
    a = parameter(np.sign(rng.normal(size=(3, 4))) * rng.uniform(0.2, 1.0, size=(3, 4)))
    return (lambda: _weighted_sum(T.relu(a), _rng(31))), [a]


def _f_sqrt():
    rng = _rng(32)
    a = parameter(rng.uniform(0.5, 3.0, size=(2, 3)))
    return (lambda: _weighted_sum(T.sqrt(a), _rng(33))), [a]


def _f_sum():
    rng = _rng(34)
    a = parameter(rng.normal(size=(2, 3, 4)))
    return (lambda: _weighted_sum(T.tsum(a, axis=1), _rng(35))), [a]


def _f_mean():
    rng = _rng(36)
    a = parameter(rng.normal(size=(2, 3, 4)))
    return (lambda: _weighted_sum(T.tmean(a, axis=-1), _rng(37))), [a]


def _f_softmax():
    rng = _rng(38)
    a = parameter(rng.normal(size=(3, 5)))
    return (lambda: _weighted_sum(T.softmax(a, axis=-1), _rng(39))), [a]


def _f_softmax_masked():
    rng = _rng(40)
    a = parameter(rng.normal(size=(2, 4)))
    mask = Tensor(np.array([[0.0, 0.0, -np.inf, 0.0],
                            [0.0, -np.inf, 0.0, -np.inf]]))
    return (lambda: _weighted_sum(T.softmax(T.add(a, mask), axis=-1), _rng(41))), [a]


def _f_linear():
    rng = _rng(42)
    x = parameter(rng.normal(size=(4, 8)))
    w = parameter(rng.normal(size=(8, 5)))
    b = parameter(rng.normal(size=(5,)))
    return (lambda: _weighted_sum(T.linear(x, w, b), _rng(43))), [x, w, b]


def _f_bce():
    rng = _rng(44)
    logits = parameter(rng.normal(size=(3, 4)))
    targets = one_hot(rng.integers(4, size=3), 4)
    return (lambda: T.bce_with_logits(logits, targets)), [logits]


def _f_attention_weights():
    rng = _rng(46)
    q = parameter(rng.normal(size=(1, 3, 4)))
    k = parameter(rng.normal(size=(1, 3, 4)))
    mask = additive_key_mask(np.array([[True, True, False]]), 1, 3)
    return (lambda: _weighted_sum(attention_weights(q, k, 4, mask), _rng(47))), [q, k]


def _f_attention_layer():
    rng = _rng(48)
    layer = MultiHeadAttention(4, 4, 4, 4, 2, _rng(49), "gc")
    x = parameter(rng.normal(size=(2, 3, 4)))
    mask = np.array([[True, True, True], [True, True, False]])
    params = [x] + list(layer.params().values())
    return (lambda: _weighted_sum(layer(x, x, mask, mask), _rng(50))), params


def _f_bilinear_map():
    rng = _rng(52)
    fusion = BilinearFusion(4, 5, 3, 4, 2, _rng(53))
    v = parameter(rng.normal(size=(1, 2, 4)))
    q = parameter(rng.normal(size=(1, 3, 5)))
    mask = pair_mask(1, 2, 3, np.array([[True, True, False]]))
    params = [v, q, fusion.map_v[0], fusion.map_q[0]]
    return (lambda: _weighted_sum(fusion.attention_map(v, q, 0, mask), _rng(54))), params


def _f_glimpse_features():
    rng = _rng(56)
    fusion = BilinearFusion(4, 5, 3, 4, 2, _rng(57))
    v = parameter(rng.normal(size=(1, 2, 4)))
    q = parameter(rng.normal(size=(1, 3, 5)))

    def loss():
        dist = fusion.attention_map(v, q, 0)
        return _weighted_sum(fusion.glimpse_feature(v, q, dist, 0), _rng(58))

    params = [v, q, fusion.feat_v[0], fusion.feat_q[0]]
    return loss, params


def _f_orthogonality():
    rng = _rng(60)
    # gradient w.r.t. pre-softmax scores, through the distributions
    scores = [parameter(rng.normal(size=(2, 6))) for _ in range(3)]

    def loss():
        dists = [T.softmax(s, axis=-1) for s in scores]
        return orthogonality_loss(dists)

    return loss, scores


def _model_factory(arch: str):
    def factory():
        cfg = FusionConfig(**{**TINY_MODEL.__dict__, "arch": arch})
        model = build_model(cfg, seed=61)
        rng = _rng(62)
        image = rng.normal(size=(1, 1, cfg.d_hid))
        question = rng.normal(size=(1, 3, cfg.d_q))
        mask = np.array([[True, True, False]])
        targets = one_hot(np.array([1]), cfg.answers)

        def loss():
            logits, bundle = model.forward(image, question, mask)
            main = T.bce_with_logits(logits, targets)
            if bundle is not None:
                main = T.add(main, T.mul(orthogonality_loss(bundle.distributions), 0.5))
            return main

        return loss, list(model.params().values())
    return factory


REGISTRY = [
    ("matmul", _f_matmul),
    ("add", _f_add),
    ("sub", _f_sub),
    ("mul", _f_mul),
    ("div", _f_div),
    ("scalar_ops", _f_scale),
    ("transpose", _f_transpose),
    ("reshape", _f_reshape),
    ("concat", _f_concat),
    ("narrow", _f_narrow),
    ("relu", _f_relu),
    ("sqrt", _f_sqrt),
    ("sum", _f_sum),
    ("mean", _f_mean),
    ("softmax", _f_softmax),
    ("softmax_masked", _f_softmax_masked),
    ("linear", _f_linear),
    ("bce_with_logits", _f_bce),
    ("attention_weights", _f_attention_weights),
    ("attention_layer", _f_attention_layer),
    ("bilinear_map", _f_bilinear_map),
    ("glimpse_features", _f_glimpse_features),
    ("orthogonality_loss", _f_orthogonality),
    ("model_omniban", _model_factory("omniban")),
    ("model_coattention", _model_factory("coattention")),
    ("model_concat", _model_factory("concat")),
]


def run_all(names=None) -> list:
    """[(entry name, worst relative error)], in registry order."""
    results = []
    for name, factory in REGISTRY:
        if names is not None and name not in names:
            continue
        build_loss, params = factory()
        results.append((name, check_gradients(build_loss, params)))
    return results


def registry_kinds() -> set:
    """Tape-record kinds exercised across the whole registry."""
    kinds = set()
    for _, factory in REGISTRY:
        build_loss, _ = factory()
        tape = Tape()
        with tape:
            build_loss()
        kinds.update(rec.kind for rec in tape.records)
    return kinds
