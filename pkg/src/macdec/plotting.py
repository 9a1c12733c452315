"""SVG learning curves from metrics CSVs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import read_metrics, smooth  # noqa: E402

COLORS = ("#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def curve(path: str | Path, window: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Episodes, mean and standard error of one metrics file.

    Aggregate files carry their own smoothed columns; per-run files are
    smoothed here with ``window`` and have no error band.
    """
    cols = read_metrics(path)
    x = cols["episode"]
    if "return_smoothed" in cols:
        return x, cols["return_smoothed"], cols.get("return_se_smoothed", np.zeros_like(x))
    return x, smooth(cols["return_mean"], window), np.zeros_like(x)


def render_curves(paths: Sequence[str | Path], out: str | Path,
                  labels: Sequence[str] | None = None, reference: float | None = None,
                  title: str = "", window: int = 1) -> Path:
    """One line per file with a standard-error band; optional dash-dot reference line."""
    if not paths:
        raise ValueError("need at least one metrics file")
    labels = list(labels) if labels else [Path(p).parent.name or Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise ValueError("one label per metrics file")
    plt.rcParams["svg.fonttype"] = "none"
    plt.rcParams["svg.hashsalt"] = "macdec"
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, (p, name) in enumerate(zip(paths, labels)):
        x, y, se = curve(p, window)
        color = COLORS[k % len(COLORS)]
        ax.plot(x, y, color=color, label=name, linewidth=1.5)
        if np.any(se > 0):
            ax.fill_between(x, y - se, y + se, color=color, alpha=0.2, linewidth=0)
    if reference is not None:
        ax.axhline(reference, color="red", linestyle="-.", linewidth=1.2, label="optimal")
    ax.set_xlabel("episode")
    ax.set_ylabel("discounted return")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out
