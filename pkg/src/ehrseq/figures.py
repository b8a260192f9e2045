"""Matplotlib figure rendering for the report path.

Every report-producing CLI stage writes a figure next to its delimited
output: token-length histograms, training curves, and per-class metric bars.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import CLASS_NAMES, WindowReport
from .model import TrainHistory
from .sequence import TokenLengthStats


def save_token_length_histogram(
    stats: TokenLengthStats, path: Union[str, Path]
) -> None:
    """Token-count distribution with the truncation limit marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    widths = np.diff(stats.histogram_edges)
    ax.bar(
        stats.histogram_edges[:-1],
        stats.histogram_counts,
        width=widths,
        align="edge",
        color="#4878b0",
        edgecolor="white",
        linewidth=0.3,
    )
    ax.axvline(stats.max_len, color="#c44e52", linestyle="--", linewidth=1.2)
    ax.text(
        stats.max_len,
        ax.get_ylim()[1] * 0.95,
        f" limit={stats.max_len}",
        color="#c44e52",
        va="top",
        fontsize=9,
    )
    ax.set_xlabel("tokens per record")
    ax.set_ylabel("records")
    ax.set_title(
        f"median={stats.median:.0f}, truncated={stats.fraction_truncated:.1%}"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_curves(history: TrainHistory, path: Union[str, Path]) -> None:
    """Training loss and validation metrics over steps."""
    steps = [r.step for r in history.records]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(steps, [r.train_loss for r in history.records], color="#4878b0")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("train loss")
    ax_val.plot(
        steps, [r.val_micro_f1 for r in history.records], label="micro-F1", color="#55a868"
    )
    ax_val.plot(
        steps,
        [r.val_micro_auprc for r in history.records],
        label="micro-AUPRC",
        color="#c44e52",
    )
    ax_val.set_xlabel("step")
    ax_val.set_ylabel("validation metric")
    ax_val.set_ylim(0, 1)
    ax_val.legend(fontsize=8)
    fig.suptitle(f"lr={history.chosen_lr:g}, stopped at {history.stopped_at_step}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metric_bars(reports: Sequence[WindowReport], path: Union[str, Path]) -> None:
    """Per-class F1/recall bars with micro rows, one panel per window."""
    reports = sorted(reports, key=lambda r: r.window_years)
    fig, axes = plt.subplots(
        1, len(reports), figsize=(3.2 * len(reports), 3.5), sharey=True, squeeze=False
    )
    names = list(CLASS_NAMES) + ["micro"]
    x = np.arange(len(names))
    width = 0.38
    for ax, wr in zip(axes[0], reports):
        f1 = [wr.report.per_class[c][0] for c in CLASS_NAMES] + [wr.report.micro_f1]
        recall = [wr.report.per_class[c][1] for c in CLASS_NAMES] + [
            wr.report.micro_recall
        ]
        ax.bar(x - width / 2, f1, width, label="F1", color="#4878b0")
        ax.bar(x + width / 2, recall, width, label="recall", color="#55a868")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_ylim(0, 1)
        ax.set_title(f"{wr.window_years} year")
    axes[0][0].set_ylabel("score")
    axes[0][-1].legend(fontsize=8)
    fig.suptitle(reports[0].model_tag)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
