"""Figures written next to the CSV/JSON reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

LABEL_COLOR = "#222222"
PRED_COLOR = "#d62728"


def figsize(scale=1.0, ratio=None):
    width = 6.4 * scale
    ratio = ratio or (np.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def plot_trajectory(series, path):
    """One panel per axis: normalised label vs prediction over frames."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(series), figsize=figsize(1.2, 0.35), squeeze=False)
        for ax, (axis, (label, pred)) in zip(axes[0], series.items()):
            frames = np.arange(len(label))
            ax.plot(frames, label, color=LABEL_COLOR, lw=1.0, label="label")
            ax.plot(frames, pred, color=PRED_COLOR, lw=0.8, alpha=0.8, label="prediction")
            ax.set_xlabel("frame")
            ax.set_ylabel(f"{axis} (normalised)")
            ax.set_ylim(-0.05, 1.05)
        axes[0][0].legend(frameon=False, loc="upper right")
        fig.savefig(path)
        plt.close(fig)


def plot_history(history, path):
    rows = history.rows if hasattr(history, "rows") else history
    if not rows:
        return
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        for key in ("train_joint", "train_cartesian", "val_joint", "val_cartesian"):
            if key in rows[0]:
                ax.plot(epochs, [r[key] for r in rows], marker="o", ms=3, label=key.replace("_", " "))
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def plot_comparison(reports, labels, path):
    """Grouped bars of per-axis mean absolute end-effector error per run."""
    mae = np.array([r.axis_mae for r in reports])
    x = np.arange(len(labels))
    w = 0.8 / 3
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(1.0, 0.45))
        for i, axis in enumerate("xyz"):
            ax.bar(x + (i - 1) * w, mae[:, i], w, label=f"{axis}-axis")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel("mean abs. eef error (m)")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
