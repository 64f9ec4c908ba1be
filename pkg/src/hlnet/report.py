"""8-bit previews and matplotlib report figures."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from hlnet.imaging import MU, tonemap_mu  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
})

_PNG_META = {"Software": None}


def quantize(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8, round half to even."""
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def planes_to_rgb(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H, W, 3). Packed 4-plane raw shows as R, mean(G1, G2), B."""
    c = x.shape[0]
    if c == 1:
        return np.repeat(x[0][..., None], 3, axis=-1)
    if c == 3:
        return np.moveaxis(x, 0, -1)
    if c == 4:
        return np.stack([x[0], 0.5 * (x[1] + x[2]), x[3]], axis=-1)
    return np.repeat(x.mean(axis=0)[..., None], 3, axis=-1)


def tonemapped_preview(x: torch.Tensor, mu: float = MU) -> np.ndarray:
    t = tonemap_mu(torch.as_tensor(x).double().clamp(0, 1), mu).numpy()
    return quantize(planes_to_rgb(t))


def signed_preview(x: np.ndarray) -> np.ndarray:
    """Zero maps to mid-gray; scaled by the largest magnitude."""
    x = np.asarray(x, dtype=np.float64)
    peak = np.abs(x).max()
    y = 0.5 + (x / (2 * peak) if peak > 0 else np.zeros_like(x))
    return quantize(planes_to_rgb(y))


def range_preview(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    y = (x - lo) / (hi - lo) if hi > lo else np.full_like(x, 0.5)
    return quantize(planes_to_rgb(y))


def write_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curve(losses, path, title="training loss"):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("mu-law L1")
    ax.set_title(title)
    _save(fig, path)


def plot_metrics(record, path):
    rec = record.sorted()
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    x = np.arange(len(rec.ids))
    axes[0].bar(x, rec.psnr, color="tab:blue")
    axes[0].set_ylabel("PSNR-mu (dB)")
    axes[1].bar(x, rec.ssim, color="tab:orange")
    axes[1].set_ylabel("SSIM-mu")
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(rec.ids, rotation=90)
    _save(fig, path)


def plot_ablation(rows, path):
    """rows: dicts with 'model', 'psnr_mu', 'ssim_mu'."""
    names = [r["model"] for r in rows]
    x = np.arange(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    axes[0].bar(x, [r["psnr_mu"] for r in rows], color="tab:blue")
    axes[0].set_ylabel("PSNR-mu (dB)")
    axes[1].bar(x, [r["ssim_mu"] for r in rows], color="tab:orange")
    axes[1].set_ylabel("SSIM-mu")
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right")
    _save(fig, path)


def plot_decomposition(f, low_up, high, path, channel=0):
    fig, axes = plt.subplots(1, 3, figsize=(8, 2.8))
    panels = [(f, "input", "gray"), (low_up, "low (upsampled)", "gray"), (high, "high", "RdBu_r")]
    for ax, (img, title, cmap) in zip(axes, panels):
        img = np.asarray(img)[channel]
        if cmap == "RdBu_r":
            peak = np.abs(img).max() or 1.0
            im = ax.imshow(img, cmap=cmap, vmin=-peak, vmax=peak)
        else:
            im = ax.imshow(img, cmap=cmap)
        ax.set_title(title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)
