"""Figure rendering for report outputs.

All figures are written to files (SVG by default) next to the delimited
outputs they illustrate; nothing is shown interactively.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "freqlens"

import matplotlib.pyplot as plt
import numpy as np

from .separation import FeatureSet, pca_project


def pca_scatter(fs: FeatureSet, path, title: str = "feature projection") -> None:
    """2-D PCA scatter colored by cluster tag."""
    proj = pca_project(fs, dims=2)
    tags = sorted({str(c) for c in fs.clusters})
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for i, tag in enumerate(tags):
        rows = np.flatnonzero(np.array([str(c) == tag for c in fs.clusters]))
        ax.scatter(proj[rows, 0], proj[rows, 1], s=12, alpha=0.7,
                   color=cmap(i % 10), label=tag, edgecolors="none")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def loss_curve(trace_rows, path, title: str = "training loss") -> None:
    """Scaled-loss trace per batch, one series per mask-ratio level."""
    rows = list(trace_rows)
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    levels = sorted({row[1] for row in rows})
    cmap = plt.get_cmap("tab10")
    for i, level in enumerate(levels):
        steps = [row[0] for row in rows if row[1] == level]
        scaled = [row[6] for row in rows if row[1] == level]
        ax.plot(steps, scaled, ".", ms=3, alpha=0.6, color=cmap(i % 10), label=f"r={level}")
    ax.set_xlabel("batch")
    ax.set_ylabel("scaled loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
