"""Figures written next to CLI outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

DPI = 120
CHANGE_CMAP = ListedColormap(["#f2f2f2", "#d7301f"])
LANDCOVER_CMAP = ListedColormap(["#b2182b", "#4d9221"])  # urban, nonurban


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def change_map_figure(labels: np.ndarray, probability: np.ndarray | None, path,
                      title: str = "Detected change") -> Path:
    panels = 1 if probability is None else 2
    fig, axes = plt.subplots(1, panels, figsize=(5 * panels, 4.5), squeeze=False)
    ax = axes[0, 0]
    ax.imshow(labels, cmap=CHANGE_CMAP, vmin=0, vmax=1, interpolation="nearest")
    ax.set_title(f"{title} ({100 * labels.mean():.2f}% changed)")
    ax.set_axis_off()
    if probability is not None:
        ax = axes[0, 1]
        im = ax.imshow(probability, cmap="magma", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title("P(change)")
        ax.set_axis_off()
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def training_curves(trace, path) -> Path:
    """Loss and pixel accuracy per epoch from a list of EpochStats."""
    epochs = [s.epoch for s in trace]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    a1.plot(epochs, [s.loss for s in trace], "o-", color="#2166ac")
    a1.set_xlabel("epoch")
    a1.set_ylabel("weighted NLL")
    a2.plot(epochs, [100 * s.accuracy for s in trace], "o-", color="#1b7837")
    a2.set_xlabel("epoch")
    a2.set_ylabel("pixel accuracy (%)")
    for ax in (a1, a2):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def confusion_figure(conf, path, labels=("change", "no change")) -> Path:
    m = conf.matrix()
    fig, ax = plt.subplots(figsize=(4, 3.6))
    ax.imshow(m, cmap="Blues")
    for (i, j), v in np.ndenumerate(m):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > m.max() / 2 else "black")
    ax.set_xticks([0, 1], labels)
    ax.set_yticks([0, 1], labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    return _save(fig, path)


def segment_figure(image: np.ndarray, segments: np.ndarray, path) -> Path:
    """RGB-ish composite (first three bands, percentile stretched) with segment borders."""
    bands = image[:3] if image.shape[0] >= 3 else np.repeat(image[:1], 3, axis=0)
    rgb = np.moveaxis(bands[::-1], 0, -1).astype(np.float64)
    lo, hi = np.percentile(rgb, [2, 98])
    rgb = np.clip((rgb - lo) / (hi - lo if hi > lo else 1.0), 0, 1)
    edge = np.zeros(segments.shape, bool)
    edge[:, 1:] |= segments[:, 1:] != segments[:, :-1]
    edge[1:, :] |= segments[1:, :] != segments[:-1, :]
    rgb[edge] = (1.0, 0.9, 0.0)
    fig, ax = plt.subplots(figsize=(6, 6 * segments.shape[0] / max(segments.shape[1], 1)))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_title(f"{int(segments.max()) + 1} superpixels")
    ax.set_axis_off()
    return _save(fig, path)


def landcover_figure(pixels: np.ndarray, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 6 * pixels.shape[0] / max(pixels.shape[1], 1)))
    ax.imshow(pixels, cmap=LANDCOVER_CMAP, vmin=0, vmax=1, interpolation="nearest")
    ax.set_title(f"urban {100 * (pixels == 0).mean():.1f}% / nonurban {100 * (pixels == 1).mean():.1f}%")
    ax.set_axis_off()
    return _save(fig, path)


def flow_figure(flow, path, step: int = 16) -> Path:
    mag = flow.magnitude()
    fig, ax = plt.subplots(figsize=(6, 6 * mag.shape[0] / max(mag.shape[1], 1)))
    im = ax.imshow(mag, cmap="viridis")
    ys, xs = np.mgrid[step // 2 : mag.shape[0] : step, step // 2 : mag.shape[1] : step]
    ax.quiver(xs, ys, flow.u[ys, xs], flow.v[ys, xs], color="white", scale_units="xy", angles="xy")
    ax.set_title("flow magnitude (px)")
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)
