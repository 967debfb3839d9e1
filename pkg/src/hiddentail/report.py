"""Figures rendered next to the delimited report files."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .attack import TraceRow  # noqa: E402
from .harness import AttackReport, Histogram  # noqa: E402

# No version or date stamp, so identical inputs give identical bytes.
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_lengths(hists: Sequence[Histogram], path, limit: int) -> None:
    fig, axes = plt.subplots(1, len(hists), figsize=(4 * len(hists), 3), sharey=True)
    if len(hists) == 1:
        axes = [axes]
    for ax, h in zip(axes, hists):
        widths = [h.edges[i + 1] - h.edges[i] for i in range(len(h.counts))]
        ax.bar(h.edges[:-1], h.counts, width=widths, align="edge", edgecolor="black", linewidth=0.5)
        ax.set_title(h.name.replace("_", " "))
        ax.set_xlim(0, limit)
        ax.set_xlabel("tokens")
    axes[0].set_ylabel("prompts")
    _save(fig, path)


def plot_trace(trace: Sequence[TraceRow], path) -> None:
    steps = [r.step for r in trace]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3))
    for name in ("loss_sem", "loss_spe", "loss_eos"):
        ax1.plot(steps, [getattr(r, name) for r in trace], label=name[5:])
    ax1.set_xlabel("step")
    ax1.set_title("raw losses")
    ax1.legend()
    for name in ("lambda_sem", "lambda_spe", "lambda_eos"):
        ax2.plot(steps, [getattr(r, name) for r in trace], label=name[7:])
    ax2.set_xlabel("step")
    ax2.set_title("adaptive weights")
    ax2.set_ylim(0, 1)
    ax2.legend()
    _save(fig, path)


def plot_comparison(reports: dict[str, AttackReport | None], path, title: str) -> None:
    labels = list(reports)
    asr = [r.adv_summary.asr if r else 0.0 for r in reports.values()]
    length = [r.adv_summary.output_length if r else 0.0 for r in reports.values()]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(labels) * 2), 3))
    ax1.bar(labels, asr)
    ax1.set_ylim(0, 1)
    ax1.set_title("ASR")
    ax2.bar(labels, length)
    ax2.set_title("mean output length")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=45)
    fig.suptitle(title)
    _save(fig, path)
