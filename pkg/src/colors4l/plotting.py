"""Matplotlib helpers for the report command. Figures are written straight
to files; nothing here opens a window."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

COLORS = {"total": "black", "l_super": "tab:blue", "l_self": "tab:orange"}


def figsize(scale: float = 1.0) -> tuple[float, float]:
    width = 6.0 * scale
    return width, width * (math.sqrt(5.0) - 1.0) / 2.0


def smooth(values, window: int):
    if window <= 1 or len(values) <= window:
        return list(values)
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_loss_curve(curves: dict, path, title: str = "", window: int = 0) -> Path:
    """Plot one line per named loss series (e.g. total, l_super, l_self)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for name, values in curves.items():
            if not values:
                continue
            w = window or max(1, len(values) // 100)
            ax.plot(range(1, len(values) + 1), smooth(values, w), lw=1.0,
                    color=COLORS.get(name), label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
