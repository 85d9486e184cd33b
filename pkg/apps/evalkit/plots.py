import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from apps.training.trainer import moving_average  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote plot {path}")
    return path


def plot_sweep(frame, path):
    """Median WER over seeds against the aligned-data fraction, one line per model kind."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    finite = frame.replace([np.inf, -np.inf], np.nan)
    for ax, column, title in zip(axes, ("clean_wer", "other_wer"), ("clean", "other")):
        medians = finite.groupby(["kind", "fraction"])[column].median().reset_index()
        for kind, rows in medians.groupby("kind"):
            ax.plot(rows["fraction"], 100 * rows[column], marker="o", label=kind)
        ax.set_xscale("log")
        ax.set_xlabel("aligned data fraction")
        ax.set_title(f"ASR WER ({title})")
        ax.grid(True, alpha=0.3)
    axes[0].set_ylabel("WER (%)")
    axes[0].legend()
    return _save(fig, path)


def plot_buckets(frame, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = ["overflow" if np.isinf(e) else f"<={int(e)}" for e in frame["max_ref_words"]]
    ax.bar(labels, 100 * frame["wer"])
    ax.set_xlabel("reference length (words)")
    ax.set_ylabel("WER (%)")
    return _save(fig, path)


def plot_losses(losses, path, window=20):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(losses) + 1), losses, alpha=0.3, label="loss")
    smoothed = moving_average(losses, window)
    if len(smoothed) != len(losses):
        ax.plot(np.arange(window, len(losses) + 1), smoothed, label=f"{window}-step average")
    ax.set_xlabel("step")
    ax.set_ylabel("next-token loss")
    ax.legend()
    return _save(fig, path)
