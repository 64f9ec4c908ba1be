"""Synthetic scenes and the exposure/clip/downsample/blur/noise degradation chain."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from hlnet.container import read_container, write_container
from hlnet.imaging import BracketSequence, RawFrame

SEED_STRIDE = 1_000_003


@dataclass
class DegradeConfig:
    exposure_ratios: list[float] = field(default_factory=lambda: [1.0, 4.0, 16.0, 64.0, 256.0])
    read_noise_sigma: float = 2e-3
    shot_noise_gain: float = 1e-3
    blur_sigma: float = 0.0
    blur_frames: list[int] = field(default_factory=lambda: [3, 4])  # 0-based: the two longest
    downscale: int = 4
    saturation_level: float = 1.0
    seed: int = 0

    def __post_init__(self):
        r = [float(v) for v in self.exposure_ratios]
        if not r or r[0] != 1.0 or any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError(f"exposure ratios must start at 1 and strictly increase, got {r}")
        self.exposure_ratios = r
        if self.downscale < 1:
            raise ValueError("downscale must be >= 1")
        if self.saturation_level <= 0:
            raise ValueError("saturation level must be positive")
        if self.read_noise_sigma < 0 or self.shot_noise_gain < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur parameters must be non-negative")

    def to_lines(self) -> list[str]:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, list):
                v = ",".join(f"{x:g}" for x in v)
            out.append(f"{k}={v}")
        return out


@dataclass
class SamplePair:
    gt: torch.Tensor  # (C, s*H, s*W) in [0, 1]
    bracket: BracketSequence

    @property
    def scene_id(self) -> str:
        return self.bracket.scene_id


def gen_scene(seed: int, c: int, h: int, w: int) -> torch.Tensor:
    """Deterministic HDR-like scene in [0, 1], shape (c, h, w).

    Smooth gradients plus band-limited texture set a log-luminance field that is
    exponentiated, so most of the image sits low with a few bright highlights.
    """
    if min(h, w) < 8:
        raise ValueError("scene dims must be >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    logl = rng.uniform(-0.5, 0.5) + rng.normal(0, 1.0) * xx + rng.normal(0, 1.0) * yy
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        logl = logl + rng.uniform(0.2, 0.6) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    texture = gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 48, mode="wrap")
    logl = logl + 0.8 * texture / (texture.std() + 1e-12)

    highlights = np.zeros((h, w))
    for _ in range(rng.integers(1, 5)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.02, 0.08) * max(h, w)
        highlights += rng.uniform(8, 40) * np.exp(-((yy * (h - 1) - cy) ** 2 + (xx * (w - 1) - cx) ** 2) / (2 * r * r))

    lum = np.exp(logl) + highlights
    tint = rng.uniform(0.6, 1.0, size=(c, 1, 1))
    scene = tint * lum[None] * (1 + 0.05 * rng.normal(size=(c, 1, 1)))
    scene = np.clip(scene, 0, None)
    scene /= scene.max()
    return torch.from_numpy(scene.astype(np.float32))


def box_downsample(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x
    c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"dims {h}x{w} not divisible by downscale {k}")
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def degrade(gt: torch.Tensor, cfg: DegradeConfig, scene_id: str = "0") -> BracketSequence:
    """Render an exposure bracket of ``gt`` (C, H, W) at 1/downscale resolution."""
    g = np.asarray(gt, dtype=np.float64)
    if g.ndim != 3:
        raise ValueError(f"gt must be (C, H, W), got {g.shape}")
    if not np.isfinite(g).all() or g.min() < 0 or g.max() > 1:
        raise ValueError("gt values must lie in [0, 1]")
    key = zlib.crc32(scene_id.encode("utf-8"))
    frames = []
    for i, ratio in enumerate(cfg.exposure_ratios):
        x = np.minimum(g * ratio, cfg.saturation_level)
        x = box_downsample(x, cfg.downscale)
        if cfg.blur_sigma > 0 and i in cfg.blur_frames:
            x = np.stack([gaussian_filter(p, cfg.blur_sigma, mode="reflect") for p in x])
        rng = np.random.default_rng([cfg.seed, i, key])
        std = np.sqrt(cfg.shot_noise_gain * x + cfg.read_noise_sigma ** 2)
        if std.any():
            x = x + std * rng.standard_normal(x.shape)
        x = np.clip(x, 0.0, cfg.saturation_level)
        frames.append(RawFrame(torch.from_numpy(x.astype(np.float32))[None], float(ratio)))
    return BracketSequence(frames, scene_id=scene_id, saturation_level=cfg.saturation_level)


def make_dataset(n_scenes: int, cfg: DegradeConfig, geometry: tuple[int, int, int]) -> list[SamplePair]:
    """``geometry`` = (c, h, w) of the low-resolution bracket frames."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    c, h, w = geometry
    pairs = []
    for i in range(n_scenes):
        gt = gen_scene(cfg.seed * SEED_STRIDE + i, c, h * cfg.downscale, w * cfg.downscale)
        pairs.append(SamplePair(gt, degrade(gt, cfg, scene_id=f"{i:04d}")))
    return pairs


# -- on-disk layout: scene_<id>.hlt per pair + manifest.txt --------------------

def pair_records(pair: SamplePair) -> dict[str, np.ndarray]:
    rec = {"gt": pair.gt.numpy()}
    for i, fr in enumerate(pair.bracket.frames):
        rec[f"frame_{i}"] = fr.data[0].numpy()
    rec["exposure_times"] = np.asarray(pair.bracket.exposure_times, dtype=np.float64)
    rec["saturation_level"] = np.asarray([pair.bracket.saturation_level], dtype=np.float64)
    return rec


def pair_from_records(rec: dict[str, np.ndarray], scene_id: str) -> SamplePair:
    times = rec["exposure_times"].tolist()
    frames = [RawFrame(torch.from_numpy(np.array(rec[f"frame_{i}"]))[None], t) for i, t in enumerate(times)]
    bracket = BracketSequence(frames, scene_id=scene_id, saturation_level=float(rec["saturation_level"][0]))
    return SamplePair(torch.from_numpy(np.array(rec["gt"])), bracket)


def write_dataset(pairs: list[SamplePair], out_dir, cfg: DegradeConfig) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for pair in pairs:
        p = out / f"scene_{pair.scene_id}.hlt"
        write_container(p, pair_records(pair))
        paths.append(p)
    lines = [f"ids={','.join(p.scene_id for p in pairs)}", *cfg.to_lines()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return paths


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def read_dataset(data_dir) -> list[SamplePair]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir / "manifest.txt")
    ids = [s for s in manifest.get("ids", "").split(",") if s]
    return [pair_from_records(read_container(data_dir / f"scene_{i}.hlt"), i) for i in ids]
