"""Analytical complexity terms, exact parameter counts, and empirical FLOP
measurement for the fusion architectures.

Analytic terms follow the big-O cost model of each architecture with unit
constants: intra-modal attention is quadratic in sequence length, each
co-attention layer adds a cross-attention and an FFN term, and each bilinear
glimpse adds a factorized interaction term (linear in d_m) plus a projection
term.  Empirical counts come from the FlopMeter under the documented
convention and are therefore convention-relative; published budgets for the
original implementations are included in reports as diagnostics only, since
their question length, bilinear width, FFN width, vocabulary size and
counting convention are unknown.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .config import FusionConfig
from .models import build_model
from .tensor import FlopMeter, Tensor

CONVENTION = ("1 multiply-add = 2 FLOPs (bare add/sub/mul tallied as madds); "
              "1 exp/log/div/sqrt = 1 FLOP; comparisons and data movement free; "
              "counts derived from shapes only")

# Reported budgets of the original implementations; absolute comparisons are
# best-effort because their full configuration is unpublished.
PUBLISHED_REFERENCE = {
    "omniban": {"params_m": 21.659, "flops_m": 182.059},
    "coattention": {"params_m": 31.910, "flops_m": 701.276},
}

FUSION_PARAM_EXCLUDE = ("proj.", "classifier.", "concat.")


def analytic_self_attention_cost(n_v: int, n_q: int, d_v: int, d_q: int) -> dict:
    """Quadratic intra-modal attention terms, with the linear projection
    terms itemized separately."""
    terms = {
        "image_quadratic": n_v * n_v * d_v,
        "question_quadratic": n_q * n_q * d_q,
        "image_projection": n_v * d_v * d_v,
        "question_projection": n_q * d_q * d_q,
    }
    terms["quadratic_total"] = terms["image_quadratic"] + terms["question_quadratic"]
    terms["total"] = terms["quadratic_total"]
    return terms


def analytic_coattention_cost(n_v: int, n_q: int, d_v: int, d_q: int,
                              layers: int) -> dict:
    """Per-layer cross-attention + FFN terms, linear in the layer count.

    The FFN term carries a unit constant here; the empirical count includes
    the expansion factor, which is the baseline's larger constant factor.
    """
    if layers < 0:
        raise ValueError("layers must be >= 0")
    self_att = analytic_self_attention_cost(n_v, n_q, d_v, d_q)
    cross = n_q * n_v * d_q + n_v * d_v * d_q + n_q * d_q * d_q
    ffn = n_q * d_q * d_q + n_v * d_v * d_v
    per_layer = cross + ffn
    return {
        "self_attention": self_att["quadratic_total"],
        "cross_attention_per_layer": cross,
        "ffn_per_layer": ffn,
        "per_layer": per_layer,
        "layers": layers,
        "layers_total": layers * per_layer,
        "total": self_att["quadratic_total"] + layers * per_layer,
    }


def analytic_omniban_cost(n_v: int, n_q: int, d_v: int, d_q: int,
                          d_m: int, glimpses: int) -> dict:
    """Factorized bilinear interaction + projection terms, linear in the
    glimpse count.  Warns when d_m leaves the low-rank regime."""
    if glimpses < 0:
        raise ValueError("glimpses must be >= 0")
    if d_m >= min(d_v, d_q):
        warnings.warn(
            f"d_m={d_m} is not small relative to min(d_v, d_q)="
            f"{min(d_v, d_q)}; the factorized cost advantage degrades",
            stacklevel=2)
    self_att = analytic_self_attention_cost(n_v, n_q, d_v, d_q)
    interaction = n_q * n_v * d_m
    projection = n_q * d_q * d_q
    per_glimpse = interaction + projection
    return {
        "self_attention": self_att["quadratic_total"],
        "interaction_per_glimpse": interaction,
        "projection_per_glimpse": projection,
        "per_glimpse": per_glimpse,
        "glimpses": glimpses,
        "glimpse_total": glimpses * per_glimpse,
        "total": self_att["quadratic_total"] + glimpses * per_glimpse,
    }


def analytic_cost(config: FusionConfig, n_v: int, n_q: int) -> dict:
    if config.arch == "coattention":
        return analytic_coattention_cost(n_v, n_q, config.d_v, config.d_q,
                                         config.coattention_layers)
    if config.arch == "omniban":
        return analytic_omniban_cost(n_v, n_q, config.d_v, config.d_q,
                                     config.d_m, config.glimpses)
    return analytic_self_attention_cost(n_v, n_q, config.d_hid, config.d_q)


def count_parameters(model_or_params, fusion_only: bool = False) -> int:
    """Exact scalar count over parameter tensors (shapes only)."""
    params = model_or_params.params() if hasattr(model_or_params, "params") \
        else model_or_params
    total = 0
    for name, p in params.items():
        if fusion_only and name.startswith(FUSION_PARAM_EXCLUDE):
            continue
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        total += arr.size
    return total


def _probe_inputs(config: FusionConfig, n_v: int, n_q: int) -> tuple:
    image = np.zeros((1, n_v, config.d_hid))
    question = np.zeros((1, n_q, config.d_q))
    mask = np.ones((1, n_q), dtype=bool)
    return image, question, mask


def measure_flops(model, image, question, mask, scope: str = "full") -> tuple:
    """(madds, transcendentals, total_flops) for one forward pass.

    ``scope="full"`` meters encoder projection, fusion and classifier;
    ``scope="fusion"`` meters only the fusion stage (intra-modal attention
    through the pooled joint representation), matching what the analytic
    terms describe.
    """
    if scope not in ("full", "fusion"):
        raise ValueError(f"unknown scope {scope!r}")
    meter = FlopMeter()
    if scope == "full":
        with meter:
            model.forward(image, question, mask)
    else:
        encoded = model.encode(image)
        with meter:
            out = model.fuse_features(encoded, question, mask)
        del out
    return meter.totals()


@dataclass
class CostReport:
    """Cost summary for one architecture at one input geometry."""

    arch: str
    n_v: int
    n_q: int
    config: dict
    analytic: dict
    params_total: int
    params_fusion: int
    flops_full: tuple       # (madds, transcendentals, total)
    flops_fusion: tuple
    convention: str = CONVENTION

    @property
    def flops_total(self) -> int:
        return self.flops_full[2]

    def published_deviation(self) -> dict:
        """Percent deviation from the published budgets, when known."""
        ref = PUBLISHED_REFERENCE.get(self.arch)
        if ref is None:
            return {}
        params_m = self.params_total / 1e6
        flops_m = self.flops_total / 1e6
        return {
            "params_m": params_m,
            "params_ref_m": ref["params_m"],
            "params_dev_pct": 100.0 * (params_m - ref["params_m"]) / ref["params_m"],
            "flops_m": flops_m,
            "flops_ref_m": ref["flops_m"],
            "flops_dev_pct": 100.0 * (flops_m - ref["flops_m"]) / ref["flops_m"],
        }


def build_cost_report(config: FusionConfig, n_v: int, n_q: int,
                      seed: int = 0) -> CostReport:
    model = build_model(config, seed=seed)
    image, question, mask = _probe_inputs(config, n_v, n_q)
    return CostReport(
        arch=config.arch,
        n_v=n_v,
        n_q=n_q,
        config=dataclasses.asdict(config),
        analytic=analytic_cost(config, n_v, n_q),
        params_total=count_parameters(model),
        params_fusion=count_parameters(model, fusion_only=True),
        flops_full=measure_flops(model, image, question, mask, "full"),
        flops_fusion=measure_flops(model, image, question, mask, "fusion"),
    )


@dataclass
class Comparison:
    first: CostReport
    second: CostReport

    @property
    def param_ratio(self) -> float:
        return self.first.params_total / self.second.params_total

    @property
    def flop_ratio(self) -> float:
        return self.first.flops_total / self.second.flops_total


def compare(first: CostReport, second: CostReport) -> Comparison:
    """Side-by-side comparison; both reports must share the input geometry."""
    if (first.n_v, first.n_q) != (second.n_v, second.n_q):
        raise ValueError(
            f"input sizes differ: ({first.n_v}, {first.n_q}) vs "
            f"({second.n_v}, {second.n_q})")
    return Comparison(first, second)


def _fmt_m(value: float) -> str:
    return f"{value / 1e6:.3f}M"


def comparison_rows(comp: Comparison) -> list:
    a, b = comp.first, comp.second
    rows = [
        ("parameters", a.params_total, b.params_total,
         a.params_total / b.params_total),
        ("parameters_fusion_only", a.params_fusion, b.params_fusion,
         a.params_fusion / b.params_fusion),
        ("flops_forward", a.flops_total, b.flops_total,
         a.flops_total / b.flops_total),
        ("flops_fusion_only", a.flops_fusion[2], b.flops_fusion[2],
         a.flops_fusion[2] / b.flops_fusion[2]),
        ("madds_forward", a.flops_full[0], b.flops_full[0],
         a.flops_full[0] / b.flops_full[0]),
        ("analytic_total", a.analytic["total"], b.analytic["total"],
         a.analytic["total"] / b.analytic["total"]),
    ]
    return rows


def comparison_to_text(comp: Comparison) -> str:
    a, b = comp.first, comp.second
    out = io.StringIO()
    out.write(f"cost comparison at N_v={a.n_v}, N_q={a.n_q}\n")
    out.write(f"counting convention: {CONVENTION}\n\n")
    header = f"{'metric':<26}{a.arch:>18}{b.arch:>18}{'ratio':>10}\n"
    out.write(header)
    out.write("-" * len(header) + "\n")
    for name, va, vb, ratio in comparison_rows(comp):
        out.write(f"{name:<26}{va:>18,}{vb:>18,}{ratio:>10.4f}\n")
    for report in (a, b):
        dev = report.published_deviation()
        if dev:
            out.write(
                f"\n{report.arch}: params {_fmt_m(report.params_total)} vs "
                f"published {dev['params_ref_m']:.3f}M "
                f"({dev['params_dev_pct']:+.1f}%); "
                f"flops {_fmt_m(report.flops_total)} vs "
                f"published {dev['flops_ref_m']:.3f}M "
                f"({dev['flops_dev_pct']:+.1f}%)\n")
        out.write(f"{report.arch} analytic terms: "
                  + ", ".join(f"{k}={v:,}" for k, v in report.analytic.items())
                  + "\n")
    return out.getvalue()


def comparison_to_csv(comp: Comparison, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", comp.first.arch, comp.second.arch, "ratio"])
        for name, va, vb, ratio in comparison_rows(comp):
            writer.writerow([name, va, vb, repr(ratio)])
        writer.writerow(["convention", CONVENTION, "", ""])


def sweep_costs(config: FusionConfig, key: str, values, n_v: int, n_q: int,
                seed: int = 0) -> list:
    """Cost reports across a parameter sweep.

    ``key`` is one of n_q, d_m, glimpses, coattention_layers; each row is
    (value, CostReport for omniban, CostReport for coattention) unless the
    config pins a single arch, in which case rows carry that arch only.
    """
    key = key.lower()
    if key not in ("n_q", "d_m", "glimpses", "coattention_layers"):
        raise ValueError(f"unsupported sweep key {key!r}")
    rows = []
    for value in values:
        cfg = dataclasses.replace(config)
        q_len = n_q
        if key == "n_q":
            q_len = int(value)
        else:
            setattr(cfg, key, int(value))
        rows.append((int(value), build_cost_report(cfg, n_v, q_len, seed)))
    return rows


def sweep_to_csv(rows_by_arch: dict, key: str, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([key, "arch", "params", "flops_forward",
                         "flops_fusion_only", "analytic_total"])
        for arch, rows in rows_by_arch.items():
            for value, report in rows:
                writer.writerow([value, arch, report.params_total,
                                 report.flops_total, report.flops_fusion[2],
                                 report.analytic["total"]])
