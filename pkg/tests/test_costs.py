"""Analytic cost terms, parameter counts, empirical FLOPs, and comparisons.

The FLOP-counter oracle here walks recorded tapes with its own per-kind cost
table, independent of the live meter's op-site accounting.
"""

import dataclasses
import json
import pathlib

import numpy as np
import pytest

from bifusion.config import FusionConfig, reference_cost_config
from bifusion.costs import (
    analytic_coattention_cost,
    analytic_omniban_cost,
    analytic_self_attention_cost,
    build_cost_report,
    compare,
    comparison_rows,
    comparison_to_text,
    count_parameters,
    measure_flops,
)
from bifusion.models import build_model
from bifusion.tensor import FlopMeter, Tape, Tensor, matmul, parameter

GOLDEN = json.loads(
    (pathlib.Path(__file__).parent / "golden" / "analytic_reference.json").read_text())


# --- independent tape-walk cost oracle --------------------------------------

def record_cost(rec):
    """(madds, transcendentals) for one tape record, from shapes alone."""
    kind, meta = rec.kind, rec.meta
    if kind in ("add", "sub", "mul", "add_scalar", "mul_scalar"):
        return meta["n"], 0
    if kind == "div":
        return 0, meta["n"]
    if kind == "matmul":
        return meta["batch"] * meta["m"] * meta["n"] * meta["k"], 0
    if kind == "softmax":
        return 2 * meta["n"] - meta["slices"], 2 * meta["n"]
    if kind == "sum":
        return meta["n_in"] - meta["n_out"], 0
    if kind == "mean":
        return meta["n_in"], 0
    if kind == "sqrt":
        return 0, meta["n"]
    if kind == "bce_with_logits":
        return 3 * meta["n"], 2 * meta["n"]
    if kind in ("transpose", "reshape", "concat", "narrow", "relu", "dropout"):
        return 0, 0
    raise AssertionError(f"cost oracle does not know kind {kind!r}")


def tape_walk_flops(tape):
    madds = sum(record_cost(r)[0] for r in tape.records)
    transc = sum(record_cost(r)[1] for r in tape.records)
    return madds, transc, 2 * madds + transc


class TestAnalyticSelfAttention:
    def test_single_token_quadratic_is_dims(self):
        terms = analytic_self_attention_cost(1, 1, 512, 768)
        assert terms["quadratic_total"] == 512 + 768

    def test_doubling_tokens_quadruples_question_term(self):
        t1 = analytic_self_attention_cost(1, 10, 512, 768)
        t2 = analytic_self_attention_cost(1, 20, 512, 768)
        assert t2["question_quadratic"] == 4 * t1["question_quadratic"]

    def test_reference_arithmetic(self):
        terms = analytic_self_attention_cost(1, 20, 512, 768)
        assert terms["quadratic_total"] == 307712
        assert terms == {**terms, **GOLDEN["self_attention"]}


class TestAnalyticCoattention:
    def test_zero_layers_equal_self_attention(self):
        base = analytic_self_attention_cost(1, 20, 512, 768)
        terms = analytic_coattention_cost(1, 20, 512, 768, layers=0)
        assert terms["total"] == base["quadratic_total"]

    def test_affine_in_layer_count(self):
        c = [analytic_coattention_cost(1, 20, 512, 768, layers=k)["total"]
             for k in (0, 1, 2)]
        assert c[2] - c[1] == c[1] - c[0]

    def test_reference_golden(self):
        terms = analytic_coattention_cost(1, 20, 512, 768, layers=5)
        for key, value in GOLDEN["coattention"].items():
            assert terms[key] == value


class TestAnalyticOmniban:
    def test_zero_glimpses_equal_self_attention(self):
        terms = analytic_omniban_cost(1, 20, 512, 768, 256, glimpses=0)
        assert terms["total"] == 307712

    def test_reference_golden(self):
        terms = analytic_omniban_cost(1, 20, 512, 768, 256, glimpses=5)
        for key, value in GOLDEN["omniban"].items():
            assert terms[key] == value

    def test_interaction_ratio_is_dm_over_dq(self):
        omn = analytic_omniban_cost(1, 20, 512, 768, 256, glimpses=5)
        co = analytic_coattention_cost(1, 20, 512, 768, layers=5)
        got = omn["interaction_per_glimpse"] / (co["cross_attention_per_layer"]
                                                - 1 * 512 * 768 - 20 * 768 * 768)
        assert got == 256 / 768

    def test_large_dm_warns(self):
        with pytest.warns(UserWarning, match="d_m"):
            analytic_omniban_cost(1, 20, 512, 768, 512, glimpses=5)


class TestCountParameters:
    def test_single_linear_with_bias(self):
        params = {"w": parameter(np.zeros((512, 256))), "b": parameter(np.zeros(256))}
        assert count_parameters(params) == 131328

    def test_empty_model(self):
        assert count_parameters({}) == 0

    def test_value_invariance(self):
        model = build_model(FusionConfig(d_v=8, d_q=8, d_m=4, d_hid=8, d_joint=8,
                                         heads=2, glimpses=2, answers=3), seed=0)
        before = count_parameters(model)
        for p in model.params().values():
            p.assign(p.data + 123.0)
        assert count_parameters(model) == before

    def test_reference_within_15_percent_of_published(self):
        cfg, n_v, n_q = reference_cost_config()
        model = build_model(cfg, seed=0)
        count = count_parameters(model)
        assert abs(count / 1e6 - 21.659) / 21.659 <= 0.15


class TestMeasureFlops:
    def test_single_matmul_convention(self):
        class OneMatmul:
            def __init__(self):
                self.w = parameter(np.zeros((7, 11)))

            def forward(self, image, question, mask):
                return matmul(Tensor(np.zeros((1, 5, 7))), self.w), None

            def encode(self, image):
                return Tensor(np.zeros((1, 5, 7)))

            def fuse_features(self, v, question, mask):
                return matmul(v, self.w)

        flops = measure_flops(OneMatmul(), None, None, None, scope="full")
        assert flops == (5 * 7 * 11, 0, 2 * 5 * 7 * 11)

    def test_deterministic(self):
        cfg = FusionConfig(d_v=16, d_q=16, d_m=8, d_hid=16, d_joint=16,
                           heads=2, glimpses=2, answers=4)
        model = build_model(cfg, seed=1)
        image = np.zeros((1, 1, 16))
        question = np.zeros((1, 5, 16))
        mask = np.ones((1, 5), dtype=bool)
        a = measure_flops(model, image, question, mask)
        b = measure_flops(model, image, question, mask)
        assert a == b

    def test_bad_scope_rejected(self):
        with pytest.raises(ValueError, match="scope"):
            measure_flops(None, None, None, None, scope="backward")


def random_tiny_config(rng):
    heads = int(rng.choice([1, 2]))
    return FusionConfig(
        d_v=int(rng.choice([4, 8])) * heads,
        d_q=int(rng.choice([4, 6])) * heads,
        d_m=int(rng.integers(2, 6)),
        d_hid=int(rng.choice([4, 8])),
        d_joint=int(rng.integers(4, 10)),
        heads=heads,
        glimpses=int(rng.integers(1, 4)),
        coattention_layers=int(rng.integers(0, 3)),
        answers=int(rng.integers(2, 6)),
    )


class TestFlopOracleEquivalence:
    @pytest.mark.parametrize("trial", range(5))
    def test_meter_equals_tape_walk(self, trial):
        rng = np.random.default_rng(100 + trial)
        cfg = random_tiny_config(rng)
        n_q = int(rng.integers(2, 6))
        image = rng.normal(size=(1, 1, cfg.d_hid))
        question = rng.normal(size=(1, n_q, cfg.d_q))
        mask = np.ones((1, n_q), dtype=bool)
        for arch in ("omniban", "coattention"):
            model = build_model(dataclasses.replace(cfg, arch=arch), seed=trial)
            meter = FlopMeter()
            tape = Tape()
            with meter, tape:
                model.forward(image, question, mask)
            assert meter.totals() == tape_walk_flops(tape)


class TestEmpiricalInvariants:
    def test_empirical_at_least_analytic_dominant(self):
        cfg, n_v, n_q = reference_cost_config()
        for arch in ("omniban", "coattention"):
            report = build_cost_report(dataclasses.replace(cfg, arch=arch), n_v, n_q)
            assert report.flops_total >= report.analytic["total"]

    def test_empirical_linear_in_layers_and_glimpses(self):
        base = FusionConfig(d_v=16, d_q=16, d_m=8, d_hid=16, d_joint=16,
                            heads=2, answers=4)
        knobs = {"coattention": "coattention_layers", "omniban": "glimpses"}
        for arch, knob in knobs.items():
            totals = []
            for depth in (1, 2, 3):
                cfg = dataclasses.replace(base, arch=arch, **{knob: depth})
                totals.append(build_cost_report(cfg, 1, 4).flops_total)
            assert totals[2] - totals[1] == totals[1] - totals[0]


class TestCompare:
    def test_identical_reports_give_unit_ratios(self):
        cfg = FusionConfig(d_v=16, d_q=16, d_m=8, d_hid=16, d_joint=16,
                           heads=2, glimpses=2, answers=4)
        report = build_cost_report(cfg, 1, 4)
        comp = compare(report, report)
        for _, va, vb, ratio in comparison_rows(comp):
            assert ratio == 1.0

    def test_mismatched_inputs_rejected(self):
        cfg = FusionConfig(d_v=16, d_q=16, d_m=8, d_hid=16, d_joint=16,
                           heads=2, glimpses=2, answers=4)
        a = build_cost_report(cfg, 1, 4)
        b = build_cost_report(cfg, 1, 5)
        with pytest.raises(ValueError, match="input sizes"):
            compare(a, b)

    def test_reference_ratios_meet_headline_bounds(self):
        cfg, n_v, n_q = reference_cost_config()
        omni = build_cost_report(cfg, n_v, n_q)
        coatt = build_cost_report(
            dataclasses.replace(cfg, arch="coattention"), n_v, n_q)
        comp = compare(omni, coatt)
        assert comp.param_ratio <= 0.75
        assert comp.flop_ratio <= 0.35
        text = comparison_to_text(comp)
        assert "convention" in text and "published" in text

    def test_flop_ratio_monotone_in_dm(self):
        cfg, n_v, n_q = reference_cost_config()
        coatt = build_cost_report(
            dataclasses.replace(cfg, arch="coattention"), n_v, n_q)
        ratios = []
        for d_m in (64, 128, 256):
            omni = build_cost_report(
                dataclasses.replace(cfg, d_m=d_m), n_v, n_q)
            ratios.append(compare(omni, coatt).flop_ratio)
        assert ratios[0] < ratios[1] < ratios[2]
