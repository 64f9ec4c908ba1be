"""PSNR and SSIM computed on mu-law tonemapped images."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from hlnet.imaging import MU, tonemap_mu

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")


def psnr_mu(pred: torch.Tensor, gt: torch.Tensor, mu: float = MU) -> float:
    _check_pair(pred, gt)
    tp = tonemap_mu(pred.double().clamp(0, 1), mu)
    tg = tonemap_mu(gt.double(), mu)
    mse = torch.mean((tp - tg) ** 2).item()
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Mean SSIM over channels and valid window positions; inputs (C, H, W)."""
    _check_pair(a, b)
    if a.dim() == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WIN or a.shape[-2] < SSIM_WIN:
        raise ValueError(f"images {tuple(a.shape[-2:])} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    x = a.double().reshape(-1, 1, *a.shape[-2:])
    y = b.double().reshape(-1, 1, *b.shape[-2:])
    win = _gaussian_window()[None, None]

    def filt(t):
        return F.conv2d(t, win)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den).mean().item()


def ssim_mu(pred: torch.Tensor, gt: torch.Tensor, mu: float = MU) -> float:
    _check_pair(pred, gt)
    return ssim(tonemap_mu(pred.double().clamp(0, 1), mu), tonemap_mu(gt.double(), mu))


@dataclass
class MetricsRecord:
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, sample_id, p, s):
        self.ids.append(sample_id)
        self.psnr.append(p)
        self.ssim.append(s)

    @property
    def psnr_mu(self) -> float:
        return sum(self.psnr) / len(self.psnr) if self.psnr else float("nan")

    @property
    def ssim_mu(self) -> float:
        return sum(self.ssim) / len(self.ssim) if self.ssim else float("nan")

    def sorted(self) -> "MetricsRecord":
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        return MetricsRecord([self.ids[i] for i in order], [self.psnr[i] for i in order],
                             [self.ssim[i] for i in order])

    def to_tsv(self) -> str:
        rows = ["sample_id\tpsnr_mu\tssim_mu"]
        rec = self.sorted()
        rows += [f"{i}\t{p:.4f}\t{s:.6f}" for i, p, s in zip(rec.ids, rec.psnr, rec.ssim)]
        rows.append(f"mean\t{self.psnr_mu:.4f}\t{self.ssim_mu:.6f}")
        return "\n".join(rows) + "\n"
