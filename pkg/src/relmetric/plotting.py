"""Report figures written as PNG files with deterministic bytes."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no software/version stamp, so repeated runs produce identical files
PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_loss_curve(history, path, window=50):
    """Per-step training loss with a trailing moving average and the lr on a twin axis."""
    steps = np.asarray(history.steps)
    loss = np.asarray(history.losses)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, loss, lw=0.5, color="0.7", label="loss")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, color="C0", label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("triplet loss")
    ax.legend(loc="upper right")
    ax2 = ax.twinx()
    ax2.plot(steps, history.lrs, color="C1", lw=0.8)
    ax2.set_ylabel("learning rate", color="C1")
    fig.tight_layout()
    return _save(fig, path)


def plot_distance_trace(trace, path, success=None):
    """Metric distance per optimization step."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(trace.steps, trace.distances, marker=".", ms=3)
    if success is not None:
        ax.axhline(success, color="C3", ls="--", lw=0.8, label=f"d = {success}")
        ax.legend(loc="upper right")
    ax.set_xlabel("step")
    ax.set_ylabel("distance to reference")
    fig.tight_layout()
    return _save(fig, path)


def plot_retrieval(results, path):
    """Grouped bars of 3-of-5 and 5-of-5 accuracy per split."""
    acc3 = [r.acc_3of5 for r in results]
    acc5 = [r.acc_5of5 for r in results]
    x = np.arange(len(results))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, acc3, width=0.4, label="3 of 5")
    ax.bar(x + 0.2, acc5, width=0.4, label="5 of 5")
    ax.set_xticks(x)
    ax.set_xticklabels([str(i) for i in x])
    ax.set_xlabel("split")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)
