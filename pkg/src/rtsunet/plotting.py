"""Static figures written next to the CSV/JSON outputs of the CLI."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COMPONENTS = ("gld_lobes1", "gld_border1", "gld_lobes2", "gld_border2")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curve(rows: list[dict], path, window: int = 50) -> Path:
    """Total and per-term training loss, with block means of the total."""
    steps = np.array([r["step"] for r in rows])
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    ax.plot(steps, [r["total"] for r in rows], color="0.7", lw=0.8, label="total")
    for name in COMPONENTS:
        if name in rows[0]:
            ax.plot(steps, [r[name] for r in rows], lw=0.8, label=name)
    n = len(rows) // window
    if n:
        total = np.array([r["total"] for r in rows[: n * window]]).reshape(n, window).mean(1)
        centers = steps[: n * window].reshape(n, window).mean(1)
        ax.plot(centers, total, "ko-", ms=3, label=f"total, {window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def _mid_slices(vol: np.ndarray, center) -> list[np.ndarray]:
    z, y, x = center
    return [vol[z], vol[:, y], vol[:, :, x]]


def erf_figure(before: np.ndarray, after: np.ndarray, center, path) -> Path:
    """Orthogonal slices through ``center`` of the ERF masks before and after
    the non-local module."""
    fig, axes = plt.subplots(2, 3, figsize=(7.5, 5))
    for row, (name, mask) in enumerate((("before", before), ("after", after))):
        for col, (sl, title) in enumerate(zip(_mid_slices(mask.astype(float), center), ("axial", "coronal", "sagittal"))):
            ax = axes[row, col]
            ax.imshow(sl, cmap="magma", vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(f"{name} / {title}", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    return _save(fig, path)


def attention_figure(weights: np.ndarray, location, path) -> Path:
    """Orthogonal slices of an attention-weight grid through the query."""
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    vmax = float(weights.max()) or 1.0
    for ax, sl, title in zip(axes, _mid_slices(weights, location), ("axial", "coronal", "sagittal")):
        im = ax.imshow(sl, cmap="viridis", vmin=0, vmax=vmax, interpolation="nearest")
        ax.set_title(title, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.8)
    return _save(fig, path)


def iou_bars(per_scan: dict[str, dict], path) -> Path:
    """Per-lobe IOU per scan as grouped bars."""
    keys = ("iou_lul", "iou_lll", "iou_rul", "iou_rll", "iou_rml")
    names = sorted(per_scan)
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    width = 0.8 / max(1, len(names))
    x = np.arange(len(keys))
    for i, name in enumerate(names):
        vals = [per_scan[name].get(k) or 0.0 for k in keys]
        ax.bar(x + i * width, vals, width, label=name)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels([k[4:] for k in keys])
    ax.set_ylim(0, 1)
    ax.set_ylabel("IOU")
    if len(names) <= 8:
        ax.legend(fontsize=7)
    return _save(fig, path)
