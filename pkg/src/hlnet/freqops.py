"""Average-pool frequency split and orthonormal Haar wavelet primitives.

All functions take (B, C, H, W) tensors.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F


class WaveletBands(NamedTuple):
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor


class FreqSplit(NamedTuple):
    high: torch.Tensor
    low: torch.Tensor
    low_up: torch.Tensor


def _check_divisible(f: torch.Tensor, k: int, what: str) -> None:
    h, w = f.shape[-2:]
    if h % k or w % k:
        raise ValueError(f"{what}: spatial dims {h}x{w} not divisible by {k}")


def lowpass_avg(f: torch.Tensor, pool_k: int = 2) -> torch.Tensor:
    if pool_k < 1:
        raise ValueError(f"pool_k must be >= 1, got {pool_k}")
    _check_divisible(f, pool_k, "lowpass_avg")
    if pool_k == 1:
        return f
    return F.avg_pool2d(f, pool_k, stride=pool_k)


def upsample_bilinear(f: torch.Tensor, scale: int) -> torch.Tensor:
    # half-pixel centres, edge-clamped (align_corners=False)
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    if scale == 1:
        return f
    return F.interpolate(f, scale_factor=scale, mode="bilinear", align_corners=False)


def split_high_low(f: torch.Tensor, pool_k: int = 2) -> FreqSplit:
    low = lowpass_avg(f, pool_k)
    low_up = upsample_bilinear(low, pool_k)
    return FreqSplit(f - low_up, low, low_up)


def dwt_haar(f: torch.Tensor) -> WaveletBands:
    """One level of the orthonormal 2-D Haar analysis.

    With each 2x2 block read row-major as (a, b / c, d)::

        ll = (a + b + c + d) / 2     hl = (a - b + c - d) / 2
        lh = (a + b - c - d) / 2     hh = (a - b - c + d) / 2
    """
    h, w = f.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"dwt_haar needs even dims, got {h}x{w}")
    a = f[..., 0::2, 0::2]
    b = f[..., 0::2, 1::2]
    c = f[..., 1::2, 0::2]
    d = f[..., 1::2, 1::2]
    return WaveletBands(
        ll=(a + b + c + d) / 2,
        lh=(a + b - c - d) / 2,
        hl=(a - b + c - d) / 2,
        hh=(a - b - c + d) / 2,
    )


def idwt_haar(bands: WaveletBands) -> torch.Tensor:
    ll, lh, hl, hh = bands
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise ValueError("wavelet bands must share one shape")
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    top = torch.stack([a, b], dim=-1).flatten(-2)
    bottom = torch.stack([c, d], dim=-1).flatten(-2)
    return torch.stack([top, bottom], dim=-2).flatten(-3, -2)


def mswf_fuse(small: torch.Tensor, large: torch.Tensor, weight: torch.Tensor,
              bias: torch.Tensor | None = None) -> torch.Tensor:
    """Merge a coarse map into a finer one through the finer map's LL band.

    ``weight`` is a (C, 2C, 1, 1) kernel mixing concat(small, LL) back to C channels;
    the detail bands of ``large`` pass through untouched.
    """
    if small.shape[:2] != large.shape[:2]:
        raise ValueError(f"batch/channel mismatch {tuple(small.shape)} vs {tuple(large.shape)}")
    if large.shape[-2] != 2 * small.shape[-2] or large.shape[-1] != 2 * small.shape[-1]:
        raise ValueError(f"large map must be exactly 2x small: {tuple(large.shape)} vs {tuple(small.shape)}")
    bands = dwt_haar(large)
    fused = F.conv2d(torch.cat([small, bands.ll], dim=1), weight, bias)
    return idwt_haar(bands._replace(ll=fused))
