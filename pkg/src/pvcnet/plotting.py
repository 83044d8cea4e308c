"""Figures written next to the CSV outputs of ``train``, ``eval`` and ``explain``."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # keeps PNG bytes stable between identical runs
    "svg.hashsalt": "pvcnet",
}

METRIC_LABELS = ("Acc", "Se", "Sp", "PPV", "Youden")


def figure_path(path, suffix: str = ".png") -> Path:
    path = Path(path)
    return path.with_suffix(suffix)


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_attention(amap, path, title: str | None = None) -> Path:
    """Beat on top, occlusion intensity below, sharing the sample axis."""
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(4.5, 3.6))
        n = np.arange(len(amap))
        top.plot(n, amap.beat, color="k", lw=1)
        top.set_ylabel("amplitude")
        if title:
            top.set_title(title)
        bottom.fill_between(n, amap.intensities, color="tab:red", alpha=0.6, lw=0)
        bottom.set_ylim(0, 1.05)
        bottom.set_ylabel("attention")
        bottom.set_xlabel("sample")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_history(history, path) -> Path:
    """Training and pooled validation loss per epoch; shading marks the active database."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ep = np.array([h.epoch for h in history])
        ax.plot(ep, [h.train_loss for h in history], label="train", color="tab:blue", lw=1)
        ax.plot(ep, [h.pooled_val_loss for h in history], label="validation (pooled)", color="tab:orange", lw=1)
        names = sorted({h.database for h in history})
        colors = plt.get_cmap("Pastel1")
        for h in history:
            ax.axvspan(h.epoch - 0.5, h.epoch + 0.5, color=colors(names.index(h.database) % 9), alpha=0.3, lw=0)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss per beat")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_metrics(rows: list[tuple[str, tuple]], path) -> Path:
    """Grouped bars, one group per database; undefined scores are left out."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 1), 3))
        width = 0.8 / len(METRIC_LABELS)
        x = np.arange(len(rows))
        for j, label in enumerate(METRIC_LABELS):
            vals = [np.nan if v[j] is None else 100 * v[j] for _, v in rows]
            ax.bar(x + (j - 2) * width, vals, width, label=label)
        ax.set_xticks(x, [r[0] for r in rows])
        ax.set_ylabel("%")
        ax.set_ylim(0, 105)
        ax.legend(ncol=5, frameon=False, loc="lower center", bbox_to_anchor=(0.5, 1.0))
        fig.tight_layout()
        return _save(fig, Path(path))
