"""Figures for run reports and the unlearning comparison (PNG via the Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def eval_curve(action_index, recall, ndcg, k: int, path) -> Path:
    """Validation Recall@K / NDCG@K at each evaluation action."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(action_index, recall, "o-", label=f"Recall@{k}")
        ax.plot(action_index, ndcg, "s--", label=f"NDCG@{k}")
        ax.set_xlabel("action")
        ax.set_ylabel("validation metric")
        ax.legend()
        return _save(fig, path)


def confidence_hist(scores, path, noisy_below: float = 1.0) -> Path:
    scores = np.asarray(scores, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(scores, bins=np.linspace(0.0, 2.0, 21), color="0.4", edgecolor="white")
        ax.axvline(noisy_below, color="C3", lw=1, ls=":")
        ax.set_xlabel("confidence score")
        ax.set_ylabel("interactions")
        ax.set_title(f"{int((scores < noisy_below).sum())} of {scores.size} below {noisy_below:g}")
        return _save(fig, path)


def loss_traces(epochs, values, injected_mask, path) -> Path:
    """Mean loss over recorded epochs, split by injected vs original interactions."""
    values = np.asarray(values, dtype=float)
    mask = np.asarray(injected_mask, dtype=bool)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for sel, label, color in ((~mask, "original", "C0"), (mask, "injected", "C3")):
            if sel.any():
                mu = values[sel].mean(axis=0)
                lo, hi = np.percentile(values[sel], [25, 75], axis=0)
                ax.plot(epochs, mu, color=color, label=f"{label} (n={int(sel.sum())})")
                ax.fill_between(epochs, lo, hi, color=color, alpha=0.15, lw=0)
        ax.set_xlabel("epoch")
        ax.set_ylabel("BPR loss")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def unlearning_curves(arms: dict, k: int, path) -> Path:
    """Validation Recall@K against cumulative training time for each arm.

    ``arms`` maps a label to (seconds, recall) sequences.
    """
    with plt.rc_context(STYLE):
        fig, (ax, bx) = plt.subplots(1, 2, figsize=(8.5, 3.4))
        for c, (label, (secs, rec)) in enumerate(arms.items()):
            ax.plot(secs, rec, color=f"C{c}", label=label)
            bx.bar(c, secs[-1] if len(secs) else 0.0, color=f"C{c}")
        ax.set_xlabel("training time (s)")
        ax.set_ylabel(f"validation Recall@{k}")
        ax.legend()
        bx.set_xticks(range(len(arms)), list(arms))
        bx.set_ylabel("wall time (s)")
        return _save(fig, path)


__all__ = ["eval_curve", "confidence_hist", "loss_traces", "unlearning_curves"]
