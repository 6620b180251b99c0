"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_training(metrics: list[dict], path) -> None:
    """Loss, PSNR, mask loss and anchor counts against iteration."""
    it = np.array([m["iteration"] for m in metrics])
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    axes[0, 0].plot(it, [m["loss"] for m in metrics], lw=0.6)
    axes[0, 0].set_yscale("log")
    axes[0, 0].set_ylabel("loss")
    psnr = np.array([m["psnr"] for m in metrics], dtype=float)
    axes[0, 1].plot(it, psnr, lw=0.4, alpha=0.5)
    if len(psnr) >= 50:
        axes[0, 1].plot(it[49:], np.convolve(psnr, np.ones(50) / 50, mode="valid"), lw=1.2)
    axes[0, 1].set_ylabel("train PSNR (dB)")
    axes[1, 0].plot(it, [m["mask_loss"] for m in metrics])
    axes[1, 0].set_ylabel("mean mask probability")
    axes[1, 1].plot(it, [m["n_anchors"] for m in metrics], label="anchors")
    axes[1, 1].plot(it, [m["n_dynamic_anchors"] for m in metrics], label="dynamic")
    axes[1, 1].legend()
    for ax in axes[1]:
        ax.set_xlabel("iteration")
    _save(fig, path)


def plot_bench(rows, path) -> None:
    """ms/frame against Gaussian count, split into compose and raster time."""
    by_mask: dict[str, list] = {}
    for r in rows:
        by_mask.setdefault(r.mask, []).append(r)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8))
    for mask, rs in by_mask.items():
        rs = sorted(rs, key=lambda r: r.n_gaussians)
        n = [r.n_gaussians for r in rs]
        axes[0].plot(n, [r.median_ms for r in rs], "o-", label=f"total, mask {mask}")
        axes[1].plot(n, [r.compose_ms for r in rs], "o-", label=f"compose, mask {mask}")
        axes[1].plot(n, [r.time_variant_ms for r in rs], "x--", label=f"time-variant, mask {mask}")
    for ax in axes:
        ax.set_xscale("log")
        ax.set_xlabel("Gaussians")
        ax.legend(fontsize=8)
    axes[0].set_yscale("log")
    axes[0].set_ylabel("median ms / frame")
    axes[1].set_ylabel("median ms")
    _save(fig, path)


def plot_ablation(table: dict[str, list[float]], path) -> None:
    """Mean held-out PSNR per strategy with the per-seed values overlaid."""
    names = list(table)
    means = [float(np.mean(table[k])) for k in names]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, means, color="#8fb3d9")
    for i, k in enumerate(names):
        ax.plot([i] * len(table[k]), table[k], "k.", ms=5)
    lo = min(min(v) for v in table.values())
    ax.set_ylim(max(0.0, lo - 3.0), max(means) + 2.0)
    ax.set_ylabel("held-out PSNR (dB)")
    _save(fig, path)


def save_strip(images: list[np.ndarray], path, titles: list[str] | None = None) -> None:
    """Frames side by side in one figure."""
    n = len(images)
    cols = min(n, 10)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.3 * cols, 1.45 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i, img in enumerate(images):
        ax = axes[i // cols, i % cols]
        ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
        if titles:
            ax.set_title(titles[i], fontsize=7)
    _save(fig, path)
