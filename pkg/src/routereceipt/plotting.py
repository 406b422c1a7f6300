"""Figure helpers for ``rr report``.  Headless; PNG only."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

WIDTH_IN = 6.0
ASPECT = 0.55


def new_figure(scale: float = 1.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH_IN * scale, WIDTH_IN * scale * ASPECT))
    return fig, ax


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        # no Software/date metadata so reruns produce identical bytes
        fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def rate_bars(rates: Mapping[str, float], denominators: Mapping[str, int], path: str | Path) -> Path:
    fig, ax = new_figure()
    names = list(rates)
    bars = ax.bar(names, [rates[n] for n in names], color="#4c72b0")
    for bar, name in zip(bars, names):
        ax.annotate(f"n={denominators[name]}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("rate")
    ax.set_title("route event rates")
    ax.tick_params(axis="x", rotation=20)
    return save(fig, path)


def histogram_bars(counts: Mapping[str, int], path: str | Path, title: str = "resolved model") -> Path:
    fig, ax = new_figure()
    names = list(counts)
    ax.barh(names, [counts[n] for n in names], color="#55a868")
    ax.invert_yaxis()
    ax.set_xlabel("receipts")
    ax.set_title(title)
    return save(fig, path)


def rate_series(days: Sequence[str], series: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    fig, ax = new_figure()
    for name, values in series.items():
        ax.plot(days, values, marker="o", markersize=3, label=name)
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("rate")
    ax.set_title("daily route event rates")
    if len(days) > 8:
        step = max(1, len(days) // 8)
        ax.set_xticks(list(days)[::step])
    ax.tick_params(axis="x", rotation=30)
    ax.legend()
    return save(fig, path)
