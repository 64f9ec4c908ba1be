"""Raw-domain preprocessing and mu-law tonemapping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

GAMMA = 1 / 2.2
MU = 5000.0
RANGE_TOL = 1e-6


@dataclass
class RawFrame:
    data: torch.Tensor  # (1, C, H, W), values >= 0
    exposure_time: float

    def __post_init__(self):
        if self.data.dim() != 4 or self.data.shape[0] != 1:
            raise ValueError(f"raw frame must be (1, C, H, W), got {tuple(self.data.shape)}")
        if not self.exposure_time > 0:
            raise ValueError(f"exposure time must be positive, got {self.exposure_time}")
        if not torch.isfinite(self.data).all() or (self.data < 0).any():
            raise ValueError("raw frame values must be finite and non-negative")


@dataclass
class BracketSequence:
    frames: list[RawFrame]
    scene_id: str = ""
    saturation_level: float = 1.0

    def __post_init__(self):
        if not self.frames:
            raise ValueError("bracket needs at least one frame")
        shape = self.frames[0].data.shape
        for i, fr in enumerate(self.frames):
            if fr.data.shape != shape:
                raise ValueError(f"frame {i} shape {tuple(fr.data.shape)} != {tuple(shape)}")
        times = [fr.exposure_time for fr in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"exposure times must be strictly increasing, got {times}")
        if not self.saturation_level > 0:
            raise ValueError("saturation level must be positive")

    @property
    def exposure_times(self) -> list[float]:
        return [fr.exposure_time for fr in self.frames]

    def stack(self) -> torch.Tensor:
        """Frames as one (N, C, H, W) tensor."""
        return torch.cat([fr.data for fr in self.frames], dim=0)


def normalize_exposure(frame: RawFrame, base_exposure: float) -> torch.Tensor:
    if not base_exposure > 0:
        raise ValueError(f"base exposure must be positive, got {base_exposure}")
    return frame.data / (frame.exposure_time / base_exposure)


def gamma_map(y: torch.Tensor, gamma: float = GAMMA) -> torch.Tensor:
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if (y < 0).any():
        raise ValueError("gamma_map input has negative values")
    return y.clamp(0.0, 1.0).pow(gamma)


def build_input(y: torch.Tensor, y_gamma: torch.Tensor) -> torch.Tensor:
    if y.shape != y_gamma.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_gamma.shape)}")
    return torch.cat([y, y_gamma], dim=1)


def _check_unit_range(x: torch.Tensor, what: str) -> torch.Tensor:
    if x.numel() and (x.min() < -RANGE_TOL or x.max() > 1 + RANGE_TOL):
        raise ValueError(f"{what} values must lie in [0, 1], got [{x.min().item():.3g}, {x.max().item():.3g}]")
    return x.clamp(0.0, 1.0)


def tonemap_mu(h: torch.Tensor, mu: float = MU) -> torch.Tensor:
    """log(1 + mu h) / log(1 + mu), for h in [0, 1]."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    h = _check_unit_range(h, "tonemap_mu")
    return torch.log1p(mu * h) / math.log1p(mu)


def tonemap_mu_inv(t: torch.Tensor, mu: float = MU) -> torch.Tensor:
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    t = _check_unit_range(t, "tonemap_mu_inv")
    return (torch.expm1(t * math.log1p(mu)) / mu).clamp(0.0, 1.0)


def preprocess_frames(frames: torch.Tensor, exposure_times, gamma: float = GAMMA) -> torch.Tensor:
    """Batched preprocessing.

    frames: (..., N, C, H, W) raw stack; exposure_times: N values or (..., N).
    Returns (..., N, 2C, H, W): normalized exposure clamped to [0, 1], then its gamma view.
    """
    t = torch.as_tensor(exposure_times, dtype=frames.dtype, device=frames.device)
    ratio = (t / t[..., :1])[..., None, None, None]
    y = (frames / ratio).clamp(0.0, 1.0)
    return torch.cat([y, gamma_map(y, gamma)], dim=-3)


def preprocess_bracket(seq: BracketSequence, gamma: float = GAMMA) -> list[torch.Tensor]:
    base = seq.frames[0].exposure_time
    out = []
    for fr in seq.frames:
        y = normalize_exposure(fr, base).clamp(0.0, 1.0)
        out.append(build_input(y, gamma_map(y, gamma)))
    return out
