"""Figure rendering for the report paths (stats, training curves, ablations)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # dropping the version stamp keeps PNGs byte-stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_stats(stats, path):
    """Four-panel histogram figure: contrasts, object size, center bias."""
    panels = (
        ("local_contrast", "local contrast"),
        ("global_contrast", "global contrast"),
        ("object_size", "object size (fraction)"),
        ("center_bias", "center bias (normalized)"),
    )
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 2, figsize=(6.4, 4.8))
        for ax, (name, label) in zip(axes.flat, panels):
            h = stats.histogram(name)
            lefts = h.edges[:-1]
            widths = [b - a for a, b in zip(h.edges[:-1], h.edges[1:])]
            ax.bar(lefts, h.counts, width=widths, align="edge", color="0.35", edgecolor="white")
            ax.set_xlabel(label)
            ax.set_ylabel("images")
        fig.tight_layout()
        return _save(fig, path)


def plot_loss_curve(log_csv, path, window: int = 20):
    steps, total = [], []
    with open(log_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            total.append(float(row["l_total"]))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(steps, total, lw=0.6, color="0.6", label="per step")
        if len(total) >= window:
            smooth = [sum(total[i - window:i]) / window for i in range(window, len(total) + 1)]
            ax.plot(steps[window - 1:], smooth, lw=1.4, color="C0", label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(rows: dict[str, dict], path, metrics=("s_alpha", "e_max", "f_max", "mae")):
    """Grouped bars, one group per metric, one bar per variant."""
    names = list(rows)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.3 * len(metrics), 3.2))
        width = 0.8 / max(len(names), 1)
        for i, name in enumerate(names):
            xs = [m + i * width for m in range(len(metrics))]
            ax.bar(xs, [rows[name].get(k) or 0.0 for k in metrics], width=width, label=name)
        ax.set_xticks([m + 0.4 - width / 2 for m in range(len(metrics))])
        ax.set_xticklabels(metrics)
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)
