"""PNG figures for calibration reports (matplotlib, non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import direction_legend  # noqa: E402

DIFFERENCE_WHITE_PX = 0.2


def save_rgb(path, rgb: np.ndarray) -> None:
    plt.imsave(str(path), np.clip(rgb, 0.0, 1.0))


def save_error_direction_map(path, rgb: np.ndarray, title: str = "") -> None:
    """Direction map with its color-wheel legend."""
    fig, (ax, lg) = plt.subplots(1, 2, figsize=(8, 4), gridspec_kw={"width_ratios": [5, 1]})
    ax.imshow(rgb, interpolation="nearest")
    ax.set_title(title)
    ax.set_axis_off()
    lg.imshow(direction_legend(96))
    lg.set_title("direction")
    lg.set_axis_off()
    fig.tight_layout()
    fig.savefig(str(path), dpi=100)
    plt.close(fig)


def save_difference_map(path, magnitude: np.ndarray, title: str = "", white_at: float = DIFFERENCE_WHITE_PX) -> None:
    """Gray map: black for zero difference, white at ``white_at`` px and above."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(np.ma.masked_invalid(magnitude), cmap="gray", vmin=0.0, vmax=white_at, interpolation="nearest")
    ax.set_title(title)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, label="px")
    fig.tight_layout()
    fig.savefig(str(path), dpi=100)
    plt.close(fig)


def save_sweep_plot(path, labels, values, ylabel: str, title: str = "") -> None:
    """Bar chart of one value per sweep setting."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([str(v) for v in labels], values, color="0.4")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(str(path), dpi=100)
    plt.close(fig)


def save_error_histogram(path, train_norms, test_norms) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    hi = max(np.percentile(train_norms, 99) if len(train_norms) else 0.0, 1e-3)
    bins = np.linspace(0.0, hi, 40)
    ax.hist(train_norms, bins=bins, alpha=0.6, label="train")
    if len(test_norms):
        ax.hist(test_norms, bins=bins, alpha=0.6, label="test")
    ax.set_xlabel("reprojection error [px]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(str(path), dpi=100)
    plt.close(fig)
