"""Fast invariant checks behind ``hlnet selftest``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from hlnet import freqops
from hlnet.blocks import SCEB
from hlnet.gradcheck import module_gradcheck, randomize_, worst
from hlnet.imaging import tonemap_mu


# log(2501) / log(5001), 40-digit mpmath evaluation
TONEMAP_HALF = 0.9186432718796463


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    seconds: float


def _broken_dwt(f):
    bands = freqops.dwt_haar(f)
    return bands._replace(ll=bands.ll * 1.01)


def check_wavelet(break_dwt=False, n=50, seed=0):
    dwt = _broken_dwt if break_dwt else freqops.dwt_haar
    gen = torch.Generator().manual_seed(seed)
    err = 0.0
    for _ in range(n):
        h, w = (2 * int(torch.randint(1, 17, (1,), generator=gen)) for _ in range(2))
        c = int(torch.randint(1, 9, (1,), generator=gen))
        f = torch.randn(1, c, h, w, generator=gen)
        err = max(err, (freqops.idwt_haar(dwt(f)) - f).abs().max().item())
    return err, 1e-5


def check_freq_split(n=50, seed=1):
    gen = torch.Generator().manual_seed(seed)
    err = 0.0
    for _ in range(n):
        f = torch.randn(1, 3, 16, 16, generator=gen, dtype=torch.float64)
        s = freqops.split_high_low(f, 2)
        err = max(err, (s.high + s.low_up - f).abs().max().item())
    const = freqops.split_high_low(torch.full((1, 2, 8, 8), 3.25), 2).high.abs().max().item()
    return max(err, const), 1e-7


def check_tonemap():
    ends = torch.tensor([0.0, 1.0], dtype=torch.float64)
    t = tonemap_mu(ends)
    mid = tonemap_mu(torch.tensor([0.5], dtype=torch.float64)).item()
    err = max(abs(t[0].item()), abs(t[1].item() - 1.0), abs(mid - TONEMAP_HALF))
    return err, 1e-6


def check_gradient(seed=0):
    torch.manual_seed(seed)
    block = randomize_(SCEB(4).double(), seed=seed)
    x = torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(seed))
    return worst(module_gradcheck(block, [x], max_per_tensor=8, seed=seed)), 1e-4


CHECKS = {
    "wavelet_reconstruction": check_wavelet,
    "freq_split_identity": check_freq_split,
    "tonemap_endpoints": check_tonemap,
    "sceb_gradient": check_gradient,
}


def run_checks(break_dwt=False) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        err, tol = fn(break_dwt=break_dwt) if name == "wavelet_reconstruction" else fn()
        results.append(CheckResult(name, err <= tol, err, tol, time.perf_counter() - t0))
    return results
