"""Figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .masks import modality_label  # noqa: E402
from .synthvol import REGIONS  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "metafuse",
}


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_report(report, path, title: str = "DSC per modality subset") -> Path:
    """Heatmap of per-subset, per-region DSC with the averages as a last row."""
    rows = report.rows
    data = np.array([[r.dsc[g] for g in REGIONS] for r in rows])
    avg = data.mean(axis=0, keepdims=True)
    table = np.vstack([data, avg]) * 100
    labels = [modality_label(r.mask) for r in rows] + ["Avg"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 0.28 * len(labels) + 1.0))
        im = ax.imshow(table, cmap="viridis", vmin=0, vmax=100, aspect="auto")
        ax.set_xticks(range(len(REGIONS)), REGIONS)
        ax.set_yticks(range(len(labels)), labels)
        for i in range(table.shape[0]):
            for j in range(table.shape[1]):
                ax.text(j, i, f"{table[i, j]:.1f}", ha="center", va="center", fontsize=7,
                        color="white" if table[i, j] < 60 else "black")
        ax.axhline(len(rows) - 0.5, color="white", lw=1.5)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.05, label="DSC (%)")
        return _save(fig, path)


def plot_training(rows: Sequence[dict], path) -> Path:
    """Per-step meta-objective (summed over tasks) and, when learned, the inner rate."""
    per_step: dict[int, float] = defaultdict(float)
    alpha: dict[int, float] = {}
    for r in rows:
        per_step[int(r["step"])] += float(r["L_full"])
        if r.get("alpha") not in (None, ""):
            alpha[int(r["step"])] = float(r["alpha"])
    steps = sorted(per_step)
    with plt.rc_context(STYLE):
        ncols = 2 if alpha else 1
        fig, axes = plt.subplots(1, ncols, figsize=(3.4 * ncols, 2.6), squeeze=False)
        ax = axes[0, 0]
        ax.plot(steps, [per_step[s] for s in steps], lw=0.8, color="C0")
        ax.set_xlabel("step")
        ax.set_ylabel("summed outer loss")
        if alpha:
            ax2 = axes[0, 1]
            a_steps = sorted(alpha)
            ax2.plot(a_steps, [alpha[s] for s in a_steps], lw=0.8, color="C3")
            ax2.set_xlabel("step")
            ax2.set_ylabel("inner rate alpha")
            ax2.ticklabel_format(axis="y", useOffset=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(results: dict[str, dict[str, float]], path) -> Path:
    """Grouped bars: mean DSC per region for each variant."""
    variants = list(results)
    x = np.arange(len(REGIONS))
    width = 0.8 / max(len(variants), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        for i, v in enumerate(variants):
            ax.bar(x + i * width, [100 * results[v][g] for g in REGIONS], width, label=v)
        ax.set_xticks(x + width * (len(variants) - 1) / 2, REGIONS)
        ax.set_ylabel("mean DSC (%)")
        ax.legend(frameon=False, fontsize=7)
        return _save(fig, path)
