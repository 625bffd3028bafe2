"""Figure rendering for the report subcommand.

Every function takes already-computed plain data (curve points, CSV rows,
attention grids) and writes a PNG; nothing here touches the model or the
metrics code, so the core library stays free of plotting concerns.
Matplotlib runs on the Agg backend and is imported lazily so that only
the report path pays for it.
"""

from __future__ import annotations

import math

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_reliability_diagram(points, path, num_bins: int) -> None:
    """Reliability diagram: empirical positive frequency against mean
    predicted probability per occupied bin, dot area tracking bin count,
    with the y=x perfect-calibration diagonal."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=1, label="perfect calibration")
    if points:
        mean_probs = [p[1] for p in points]
        freqs = [p[2] for p in points]
        counts = [p[3] for p in points]
        total = sum(counts)
        sizes = [20 + 180 * c / total for c in counts]
        ax.plot(mean_probs, freqs, c="C0", lw=1.5, zorder=2)
        ax.scatter(mean_probs, freqs, s=sizes, c="C0", zorder=3,
                   label="model (dot area = bin count)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("mean predicted probability")
    ax.set_ylabel("positive frequency")
    ax.set_title(f"Reliability ({num_bins} bins)")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_roc_figure(points, path, auroc_value: float | None = None) -> None:
    """ROC curve from (fpr, tpr, threshold) points plus the chance diagonal."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=1, label="chance")
    fprs = [p[0] for p in points]
    tprs = [p[1] for p in points]
    label = "model" if auroc_value is None else f"model (AUROC {auroc_value:.3f})"
    ax.plot(fprs, tprs, c="C1", lw=1.5, label=label)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(history, path) -> None:
    """Per-epoch loss components from training history rows.

    `history` is a sequence of objects with epoch/l_vote/l_age/l_sex/
    l_reg/l_wd/total attributes (EpochStats or the CSV reader's rows).
    """
    plt = _pyplot()
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h.total for h in history], c="k", lw=1.8, label="total")
    for key, color in (("l_vote", "C0"), ("l_age", "C1"),
                       ("l_sex", "C2"), ("l_reg", "C3")):
        vals = [getattr(h, key) for h in history]
        if any(v != 0.0 for v in vals):
            ax.plot(epochs, vals, c=color, lw=1.2, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("Training losses")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_overlay(grid: np.ndarray, image: np.ndarray,
                           disc_center: tuple[float, float], disc_radius: float,
                           path, title: str = "fusion attention") -> None:
    """Attention heatmap upsampled over the eye image, with the planted
    disc circle drawn for reference.

    `grid` is the [g, g] CLS-to-patch attention map, `image` the [C, H, W]
    eye it attends over; `disc_center` is (row, col) in pixels.
    """
    plt = _pyplot()
    h, w = image.shape[-2:]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(image[0], cmap="gray", vmin=0.0, vmax=1.0)
    # nearest-neighbour upsampling keeps patch boundaries visible
    ax.imshow(np.kron(grid, np.ones((h // grid.shape[0], w // grid.shape[1]))),
              cmap="inferno", alpha=0.45, vmin=0.0)
    circle = plt.Circle((disc_center[1], disc_center[0]), disc_radius,
                        fill=False, color="cyan", lw=1.5)
    ax.add_patch(circle)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_bars(rows, path, keys=("auroc", "brier", "ece")) -> None:
    """Grouped bars of mean test metrics per ablation row, one panel per
    metric, error bars showing the per-seed standard deviation."""
    plt = _pyplot()
    labels = []
    for row in rows:
        flags = [c for c, on in (("B", row.use_binocular), ("V", row.use_voting),
                                 ("M", row.use_metadata)) if on]
        labels.append("+".join(flags) if flags else "base")
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3.6))
    if len(keys) == 1:
        axes = [axes]
    x = np.arange(len(rows))
    for ax, key in zip(axes, keys):
        means = [row.means[key] for row in rows]
        sds = [row.sds[key] for row in rows]
        ax.bar(x, means, yerr=sds, capsize=3,
               color=[f"C{i}" for i in range(len(rows))])
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_title(key)
        lo, hi = min(means), max(means)
        pad = max(3 * max(sds, default=0.0), 0.15 * (hi - lo), 1e-3)
        ax.set_ylim(max(0.0, lo - pad), hi + pad)
    fig.suptitle("Ablation (mean over seeds, +/- sd)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_vote_histogram(vote_means: np.ndarray, vote_stds: np.ndarray, path) -> None:
    """Two-panel summary of the vote distribution across samples: mean
    probability histogram and per-sample vote spread histogram."""
    plt = _pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.6))
    ax0.hist(vote_means, bins=20, range=(0, 1), color="C0")
    ax0.set_xlabel("mean vote probability")
    ax0.set_ylabel("samples")
    ax0.set_title("Predicted probabilities")
    upper = max(float(vote_stds.max()) if vote_stds.size else 0.0, 1e-3)
    ax1.hist(vote_stds, bins=20, range=(0.0, math.ceil(upper * 100) / 100),
             color="C3")
    ax1.set_xlabel("vote standard deviation")
    ax1.set_ylabel("samples")
    ax1.set_title("Vote spread")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
