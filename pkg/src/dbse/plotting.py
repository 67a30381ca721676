"""Figures written next to the CSV outputs. Headless (Agg) and deterministic."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import epoch_means  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "dbse",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history: list[dict], path) -> Path:
    """Per-epoch means of each loss term."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for key in ("recon_rest", "recon_anchor"):
            axes[0].plot(epoch_means(history, key), label=key)
        axes[0].set_title("reconstruction log-likelihood")
        for key in ("kl_static", "kl_dynamic"):
            axes[1].plot(epoch_means(history, key), label=key)
        axes[1].set_title("KL terms")
        axes[2].plot(epoch_means(history, "total"), color="k")
        axes[2].set_title("objective")
        for ax in axes:
            ax.set_xlabel("epoch")
        axes[0].legend()
        axes[1].legend()
        return _save(fig, path)


def plot_report_bars(report, path, keys=None) -> Path:
    """Bar chart of one report's metrics, with chance levels as dashed lines when present."""
    keys = keys or [k for k in report.metrics if not k.startswith("chance")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(keys)), 3))
        vals = [report.metrics[k] for k in keys]
        ax.bar(range(len(keys)), vals, color="tab:blue")
        ax.set_xticks(range(len(keys)), keys, rotation=30, ha="right")
        for name, style in (("chance_static", "--"), ("chance_dynamic", ":")):
            if name in report.metrics:
                ax.axhline(report.metrics[name], ls=style, color="gray", label=name)
        if any(k.startswith("chance") for k in report.metrics):
            ax.legend(fontsize=7)
        ax.set_title(report.protocol)
        return _save(fig, path)


def plot_swaps(x1, x2, swap1, swap2, path, n_show: int = 3, channel: int = 0) -> Path:
    """One channel of the originals and their swapped reconstructions, one row per pair."""
    n_show = min(n_show, len(x1))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n_show, 2, figsize=(8, 2 * n_show), squeeze=False)
        t = np.arange(x1.shape[1])
        for r in range(n_show):
            a, b = axes[r]
            a.plot(t, x1[r, :, channel], label="x1")
            a.plot(t, x2[r, :, channel], label="x2")
            b.plot(t, swap1[r, :, channel], label="dec(s1, d2)")
            b.plot(t, swap2[r, :, channel], label="dec(s2, d1)")
            if r == 0:
                a.legend(fontsize=7)
                b.legend(fontsize=7)
        axes[-1, 0].set_xlabel("t")
        axes[-1, 1].set_xlabel("t")
        return _save(fig, path)


def _pca2(z: np.ndarray) -> np.ndarray:
    z = z - z.mean(axis=0)
    if z.shape[1] < 2:
        return np.c_[z, np.zeros(len(z))]
    _, _, vt = np.linalg.svd(z, full_matrices=False)
    return z @ vt[:2].T


def plot_embeddings(s, d_pooled, static_labels, dynamic_labels, path) -> Path:
    """First two principal components of s and pooled d, coloured by each label kind."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(7, 6))
        for row, (z, name) in enumerate(((s, "s"), (d_pooled, "pooled d"))):
            p = _pca2(np.asarray(z))
            for col, (lab, lname) in enumerate(((static_labels, "static"), (dynamic_labels, "dynamic"))):
                ax = axes[row, col]
                ax.scatter(p[:, 0], p[:, 1], c=lab, s=4, cmap="tab10")
                ax.set_title(f"{name} by {lname} label")
        return _save(fig, path)
