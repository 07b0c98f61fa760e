"""Static figure output: grouped retrieval bars and loss curves."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps SVG output byte-stable across reruns
_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "retext"
    fig.savefig(path, metadata=_SVG_META if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def grouped_bars(cells: Sequence[str], metrics: Mapping[str, Sequence[float]], path: str | Path,
                 title: str = "", ylabel: str = "score (%)") -> Path:
    """One group per cell, one bar per metric (values in [0, 1], drawn as percent)."""
    n_metrics = max(len(metrics), 1)
    width = 0.8 / n_metrics
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(cells) + 1.5), 3.6))
    for j, (name, values) in enumerate(metrics.items()):
        xs = [i + (j - (n_metrics - 1) / 2) * width for i in range(len(cells))]
        bars = ax.bar(xs, [100 * v for v in values], width, label=name)
        ax.bar_label(bars, fmt="%.1f", fontsize=7, padding=1)
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels(cells, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 105)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(rows: Sequence[Mapping[str, float]], columns: Sequence[str], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    steps = [float(r["step"]) for r in rows]
    for col in columns:
        vals = [float(r[col]) for r in rows]
        if any(vals):
            ax.plot(steps, vals, label=col, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)
