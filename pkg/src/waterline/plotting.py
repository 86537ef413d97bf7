"""Figures written next to the CLI's CSV outputs.

Everything renders through the Agg backend with fixed sizes and no embedded
software/date metadata, so reruns produce byte-identical PNG files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

CATEGORY_COLORS = {"conv": "#3b6ea5", "se": "#d08c2f", "fc": "#6a9f58",
                   "activation": "#999999", "elementwise": "#bbbbbb", "other": "#444444"}


def save_figure(fig, path, dpi: int = 100) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_layer_macs(report, path, title: str = "Multiply-accumulates per layer") -> Path:
    """Horizontal bars of per-layer MACs, coloured by layer category, log scale."""
    rows = [r for r in report.rows if r.macs > 0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, max(2.5, 0.12 * len(rows) + 1.0)))
        y = np.arange(len(rows))
        colors = [CATEGORY_COLORS.get(report.category(r.kind), "#444444") for r in rows]
        ax.barh(y, [r.macs for r in rows], color=colors, height=0.8)
        ax.set_yticks(y)
        ax.set_yticklabels([r.name for r in rows], fontsize=4)
        ax.invert_yaxis()
        ax.set_xscale("log")
        ax.set_xlabel("MACs")
        ax.set_title(title)
        seen = sorted({report.category(r.kind) for r in rows})
        handles = [plt.Rectangle((0, 0), 1, 1, color=CATEGORY_COLORS.get(c, "#444444"))
                   for c in seen]
        ax.legend(handles, seen, loc="lower right", frameon=False)
        fig.tight_layout()
    return save_figure(fig, path)


def plot_frame_metrics(reports: Sequence, path, title: str = "Per-frame metrics") -> Path:
    """Precision, recall and F1 per frame, with the false-positive count on a twin axis."""
    frames = [r.frame for r in reports]

    def series(name):
        return [np.nan if getattr(r, name) is None else getattr(r, name) for r in reports]

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        for name, marker in (("precision", "o"), ("recall", "s"), ("f1", "^")):
            ax.plot(frames, series(name), marker=marker, markersize=3, linewidth=1, label=name)
        ax.set_xlabel("frame")
        ax.set_ylabel("score")
        ax2 = ax.twinx()
        ax2.bar(frames, [r.fp or 0 for r in reports], color="#cccccc", alpha=0.6, zorder=0,
                label="FP")
        ax2.set_ylim(0, max([1] + [r.fp or 0 for r in reports]) * 1.1)
        ax2.set_ylabel("false positives")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_zorder(ax2.get_zorder() + 1)
        ax.patch.set_visible(False)
        ax.legend(loc="lower left", frameon=False)
        ax.set_title(title)
        fig.tight_layout()
    return save_figure(fig, path)


def plot_loss_history(history: Sequence, path, title: str = "Training loss") -> Path:
    """Mean per-sample energy and accuracy per epoch, stages laid end to end."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        x = np.arange(1, len(history) + 1)
        stages = sorted({h.stage for h in history})
        for st in stages:
            idx = [i for i, h in enumerate(history) if h.stage == st]
            ax.plot(x[idx], [history[i].mean_loss for i in idx], marker="o", markersize=3,
                    linewidth=1, label=f"stage {st} loss")
        ax.set_xlabel("epoch (cumulative)")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_ylabel("mean energy")
        ax2 = ax.twinx()
        ax2.plot(x, [h.accuracy for h in history], color="#888888", linestyle="--",
                 linewidth=1, label="accuracy")
        ax2.set_ylim(0, 1.05)
        ax2.set_ylabel("accuracy")
        ax.legend(loc="upper right", frameon=False)
        ax.set_title(title)
        fig.tight_layout()
    return save_figure(fig, path)
