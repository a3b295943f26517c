"""Static figures (SVG) drawn from the same frames that are written as CSV."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

# fixed ids and no timestamp so reruns give the same file
plt.rcParams["svg.hashsalt"] = "ammfactors"
_SAVE = {"metadata": {"Date": None}}


def _finish(fig, ax, path, title, ylabel):
    ax.set_title(title)
    if ylabel:
        ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", **_SAVE)
    plt.close(fig)
    return path


def line_chart(frame: pd.DataFrame, path, title: str = "", ylabel: str = "",
               logy: bool = False, vline=None) -> Path:
    """One line per column against the index; ``logy`` switches to a log y axis."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for col in frame.columns:
        s = frame[col].dropna()
        if len(s):
            ax.plot(s.index, s.to_numpy(float), label=str(col), linewidth=1.2)
    if logy and (frame.to_numpy(float)[np.isfinite(frame.to_numpy(float))] > 0).all():
        ax.set_yscale("log")
    if vline is not None:
        ax.axvline(pd.Timestamp(vline), color="k", linestyle="--", linewidth=0.8)
    if len(frame.columns) > 1:
        ax.legend(fontsize=8)
    fig.autofmt_xdate()
    return _finish(fig, ax, path, title, ylabel)


def bar_chart(frame: pd.DataFrame, path, title: str = "", ylabel: str = "",
              logy: bool = False) -> Path:
    """Grouped bars: index on the x axis, one bar per column."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    n = max(len(frame.columns), 1)
    x = np.arange(len(frame.index))
    width = 0.8 / n
    for k, col in enumerate(frame.columns):
        ax.bar(x + (k - (n - 1) / 2) * width, frame[col].to_numpy(float), width, label=str(col))
    ax.set_xticks(x)
    ax.set_xticklabels([str(i) for i in frame.index], rotation=30, ha="right")
    if logy:
        ax.set_yscale("log")
    if n > 1:
        ax.legend(fontsize=8)
    return _finish(fig, ax, path, title, ylabel)


def heatmap(matrix: pd.DataFrame, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    im = ax.imshow(matrix.to_numpy(float), cmap="RdBu_r", vmin=-1, vmax=1)
    ax.set_xticks(range(len(matrix.columns)))
    ax.set_xticklabels(matrix.columns, rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.index)))
    ax.set_yticklabels(matrix.index)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix.iat[i, j]:.2f}", ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax)
    return _finish(fig, ax, path, title, "")


def cumulative(returns: pd.DataFrame) -> pd.DataFrame:
    """Wealth paths ``prod(1 + r)`` with missing days treated as flat."""
    return (1.0 + returns.fillna(0.0)).cumprod().where(returns.notna().cumsum() > 0)
