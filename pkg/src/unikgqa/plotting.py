"""Figure rendering for training logs and evaluation reports.

Every figure goes straight to a file next to the delimited outputs; no
interactive backends. Callers pass plain dict rows (the same records
that land in the JSONL logs), keeping this module free of model
imports.
"""

from __future__ import annotations

import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

log = logging.getLogger(__name__)

FIG_DPI = 150


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    log.info("wrote figure %s", path)
    return path


def plot_training_curves(history: list[dict], path: str, title: str) -> str:
    """Loss per epoch, plus validation hits@1 when present."""
    epochs = [row["epoch"] for row in history if row.get("loss") is not None]
    losses = [row["loss"] for row in history if row.get("loss") is not None]
    val_rows = [row for row in history if row.get("valid_hits1") is not None]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", color="tab:blue", label="training loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:blue")
    ax.set_title(title)
    if val_rows:
        twin = ax.twinx()
        twin.plot(
            [row["epoch"] for row in val_rows],
            [row["valid_hits1"] for row in val_rows],
            marker="s", color="tab:orange", label="validation hits@1",
        )
        twin.set_ylabel("validation hits@1", color="tab:orange")
        twin.set_ylim(-0.05, 1.05)
    return _save(fig, path)


def plot_eval_report(report: dict, path: str) -> str:
    """Aggregate bars plus the per-question F1 histogram and the
    subgraph-size/coverage breakdown."""
    per_question = report.get("per_question", [])
    aggregates = report.get("aggregates", {})

    fig, axes = plt.subplots(1, 3, figsize=(12, 4))

    names = ["hits1", "macro_f1", "coverage"]
    values = [aggregates.get(n, 0.0) for n in names]
    axes[0].bar(names, values, color=["tab:blue", "tab:orange", "tab:green"])
    axes[0].set_ylim(0, 1.05)
    axes[0].set_title("aggregate metrics")
    for i, v in enumerate(values):
        axes[0].text(i, v + 0.02, f"{v:.3f}", ha="center")

    if per_question:
        axes[1].hist([q["f1"] for q in per_question], bins=20, range=(0, 1),
                     color="tab:orange")
    axes[1].set_xlabel("per-question F1")
    axes[1].set_ylabel("questions")
    axes[1].set_title("F1 distribution")

    if per_question:
        covered = [q["subgraph_size"] for q in per_question if q["coverage"]]
        missed = [q["subgraph_size"] for q in per_question if not q["coverage"]]
        bins = 15
        axes[2].hist([covered, missed], bins=bins, stacked=True,
                     color=["tab:green", "tab:red"], label=["covered", "missed"])
        axes[2].legend()
    axes[2].set_xlabel("retrieved subgraph size")
    axes[2].set_ylabel("questions")
    axes[2].set_title("coverage by subgraph size")

    return _save(fig, path)


def plot_coverage_sweep(ks: list[int], coverages: list[float], path: str) -> str:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ks, coverages, marker="o", color="tab:green")
    ax.set_xlabel("top-K retrieved nodes")
    ax.set_ylabel("answer coverage rate")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("coverage vs. K")
    return _save(fig, path)
