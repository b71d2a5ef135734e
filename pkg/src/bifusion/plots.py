"""Figure rendering for the report paths.

Figures are rendered to files next to the CSV outputs; the CSVs remain the
canonical machine-readable contract.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(histories: dict, path: str) -> None:
    """Loss and validation-accuracy curves, one line per seed.

    ``histories`` maps a seed label to a list of epoch metric rows.
    """
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for label, history in histories.items():
        epochs = [m.epoch for m in history]
        ax_loss.plot(epochs, [m.train_loss for m in history], label=f"seed {label}")
        ax_acc.plot(epochs, [m.val_acc for m in history], label=f"seed {label}")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_title("classification loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.set_title("validation accuracy")
    if histories:
        ax_acc.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cost_comparison(reports: list, path: str) -> None:
    """Grouped bars of parameter and FLOP budgets (millions, log scale)."""
    fig, (ax_p, ax_f) = plt.subplots(1, 2, figsize=(9, 4))
    names = [r.arch for r in reports]
    params_m = [r.params_total / 1e6 for r in reports]
    flops_m = [r.flops_total / 1e6 for r in reports]
    for ax, values, title in ((ax_p, params_m, "parameters (M)"),
                              (ax_f, flops_m, "forward FLOPs (M)")):
        bars = ax.bar(names, values, color=["tab:blue", "tab:orange"][:len(names)])
        ax.set_title(title)
        ax.set_yscale("log")
        ax.bar_label(bars, fmt="%.1f", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_scaling_plot(rows_by_arch: dict, key: str, path: str) -> None:
    """Log-log scaling of empirical fusion FLOPs and the analytic model."""
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    for arch, rows in rows_by_arch.items():
        xs = [value for value, _ in rows]
        ax.loglog(xs, [r.flops_fusion[2] for _, r in rows], "o-",
                  label=f"{arch} measured")
        ax.loglog(xs, [r.analytic["total"] for _, r in rows], "s--",
                  label=f"{arch} analytic")
    ax.set_xlabel(key)
    ax.set_ylabel("fusion cost")
    ax.legend(fontsize="small")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
