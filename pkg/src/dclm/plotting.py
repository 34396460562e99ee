"""Figures written next to the text/JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dclm.evaluator import DA_NAMES, EvalReport, relative_change  # noqa: E402


def set_style():
    plt.rcParams.update({
        "font.size": 9,
        "axes.titlesize": 10,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
        "savefig.bbox": "tight",
        # keep the PNG bytes stable between runs
        "svg.hashsalt": "dclm",
    })


def plot_perplexities(reports: list[EvalReport], path) -> None:
    """Horizontal bars of last-turn perplexity, best model on top."""
    set_style()
    reports = sorted(reports, key=lambda r: r.perplexity, reverse=True)
    fig, ax = plt.subplots(figsize=(5, 0.35 * len(reports) + 1))
    labels = [f"{r.model_id} (K={r.k})" for r in reports]
    ax.barh(labels, [r.perplexity for r in reports], color="0.55")
    for i, r in enumerate(reports):
        ax.text(r.perplexity, i, f" {r.perplexity:.1f}", va="center", fontsize=8)
    ax.set_xlabel("perplexity (last turn)")
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_tag_changes(reports: list[EvalReport], baseline: EvalReport, partition: str, path,
                     top: int = 5) -> None:
    """Grouped bars of per-tag perplexity change (%) against ``baseline``."""
    set_style()
    tags = baseline.top_tags(partition, top)
    names = [DA_NAMES.get(t, t) if partition == "da" else t for t in tags]
    fig, ax = plt.subplots(figsize=(1.2 * len(tags) + 2, 3))
    width = 0.8 / max(len(reports), 1)
    for j, r in enumerate(reports):
        ch = relative_change(r, baseline)[partition]
        xs = [i + (j - (len(reports) - 1) / 2) * width for i in range(len(tags))]
        ax.bar(xs, [ch[t] for t in tags], width, label=r.model_id)
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xticks(range(len(tags)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel(f"perplexity change vs {baseline.model_id} (%)")
    ax.legend(frameon=False, fontsize=7)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_curves(logs: dict, path) -> None:
    """Validation perplexity per epoch for one or more :class:`TrainLog` objects."""
    set_style()
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for name, tlog in logs.items():
        ax.plot([r.epoch for r in tlog.records], [r.valid_perplexity for r in tlog.records],
                marker="o", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation perplexity")
    ax.legend(frameon=False, fontsize=7)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
