"""Report figures: training curves and the per-complexity breakdown.

Uses the non-interactive Agg backend so figures render on headless machines.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import BUCKETS  # noqa: E402

PHASE_COLORS = {"ml": "#1f77b4", "rl": "#d62728"}


def plot_training_curves(log: Sequence[dict], path) -> Path:
    """Train/valid F1 and cache coverage per iteration, shaded by phase."""
    path = Path(path)
    fig, (ax_f1, ax_cov) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    its = [e["iteration"] for e in log]
    ax_f1.plot(its, [e["train_f1"] for e in log], color="#555555", label="train F1 (beam top-1)")
    valid = [(e["iteration"], e["valid_f1"]) for e in log if e.get("valid_f1") is not None]
    if valid:
        ax_f1.plot(*zip(*valid), color="#2ca02c", marker=".", label="valid F1")
    for phase, color in PHASE_COLORS.items():
        xs = [e["iteration"] for e in log if e["phase"] == phase]
        if xs:
            ax_f1.axvspan(min(xs) - 0.5, max(xs) + 0.5, color=color, alpha=0.08, label=f"{phase} phase")
    ax_f1.set_ylabel("F1")
    ax_f1.set_ylim(0, 1.02)
    ax_f1.legend(loc="lower right", fontsize=8)
    ax_cov.plot(its, [e["cache_coverage"] for e in log], color="#9467bd")
    ax_cov.set_ylabel("cache coverage")
    ax_cov.set_xlabel("iteration")
    ax_cov.set_ylim(0, 1.02)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_complexity(per_complexity: dict, path, title: str = "") -> Path:
    """Bar chart of program fraction and avg F1 per expression-count bucket."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(BUCKETS))
    frac = [100 * per_complexity[b]["fraction"] for b in BUCKETS]
    f1 = [100 * per_complexity[b]["avg_f1"] for b in BUCKETS]
    ax.bar([x - 0.2 for x in xs], frac, width=0.4, label="% of programs")
    ax.bar([x + 0.2 for x in xs], f1, width=0.4, label="avg F1")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(BUCKETS)
    ax.set_xlabel("expressions in decoded program")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
