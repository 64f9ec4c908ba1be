"""End-to-end network: alignment, recurrent shared/per-frame extraction, x4 head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from hlnet.blocks import HLFDB, SCEB, HLFDBConfig, ResidualBlock, conv1x1, conv3x3
from hlnet.freqops import upsample_bilinear
from hlnet.imaging import GAMMA, BracketSequence, preprocess_frames

ABLATIONS = ("full", "no_sceb", "no_hlfdb", "ll", "gg", "wavelet")
_ABLATION_VARIANT = {"ll": "local_only", "gg": "global_only", "wavelet": "wavelet_split"}
ALIGNMENT_MODES = ("identity", "translation")


@dataclass
class HLNetConfig:
    n_frames: int = 5
    c_raw: int = 4
    width: int = 16
    n_sceb: int = 1
    n_hlfdb: int = 1
    hlfdb_cfg: HLFDBConfig = field(default_factory=HLFDBConfig)
    upscale: int = 4
    alignment_mode: str = "identity"
    ablation: str = "full"
    gamma: float = GAMMA

    def __post_init__(self):
        if isinstance(self.hlfdb_cfg, dict):
            self.hlfdb_cfg = HLFDBConfig(**self.hlfdb_cfg)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.alignment_mode not in ALIGNMENT_MODES:
            raise ValueError(f"unknown alignment mode {self.alignment_mode!r}")
        if self.upscale < 1 or self.upscale & (self.upscale - 1):
            raise ValueError(f"upscale must be a power of 2, got {self.upscale}")
        if self.upscale > 1 and self.width % 4:
            raise ValueError("width must be divisible by 4 for sub-pixel upsampling")
        # the block width always follows the network width; the ablation name picks the variant
        variant = _ABLATION_VARIANT.get(self.ablation, "standard")
        self.hlfdb_cfg = replace(self.hlfdb_cfg, width=self.width, variant=variant)

    @property
    def spatial_multiple(self) -> int:
        return 1 if self.ablation == "no_hlfdb" else self.hlfdb_cfg.spatial_multiple

    def to_dict(self) -> dict:
        return asdict(self)


# -- alignment -----------------------------------------------------------------

def shift_reflect(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """out[..., y, x] = x[..., y - dy, x - dx], reflect-padded at the borders."""
    r = max(abs(dy), abs(dx))
    if r == 0:
        return x
    h, w = x.shape[-2:]
    padded = F.pad(x, (r, r, r, r), mode="reflect")
    return padded[..., r - dy:r - dy + h, r - dx:r - dx + w]


def estimate_shift(ref: torch.Tensor, moving: torch.Tensor, radius: int = 4) -> tuple[int, int]:
    """Integer (dy, dx) such that ``moving`` best matches ``ref`` shifted by (dy, dx).

    Exhaustive search over the +-radius window on mean absolute difference,
    scored away from the reflect-padded border. Ties go to the smaller shift.
    """
    h, w = ref.shape[-2:]
    if h <= 2 * radius or w <= 2 * radius:
        raise ValueError(f"frame {h}x{w} too small for a +-{radius} search")
    inner = (..., slice(radius, h - radius), slice(radius, w - radius))
    target = moving[inner]
    candidates = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda s: (abs(s[0]) + abs(s[1]), s),
    )
    best, best_err = (0, 0), math.inf
    for dy, dx in candidates:
        err = (shift_reflect(ref, dy, dx)[inner] - target).abs().mean().item()
        if err < best_err:
            best, best_err = (dy, dx), err
    return best


def align_frames(frames: list[torch.Tensor], mode: str = "identity", radius: int = 4,
                 channels: slice | None = None) -> list[torch.Tensor]:
    """Align every frame to frame 0.

    ``channels`` selects the planes used for matching (the gamma half of the
    preprocessed input by default).
    """
    if not frames:
        raise ValueError("align_frames needs at least one frame")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("align_frames: frames must share one shape")
    if mode == "identity":
        return list(frames)
    if mode != "translation":
        raise ValueError(f"unknown alignment mode {mode!r}")
    if channels is None:
        channels = slice(shape[-3] // 2, None)
    ref = frames[0][..., channels, :, :]
    out = [frames[0]]
    for f in frames[1:]:
        dy, dx = estimate_shift(ref, f[..., channels, :, :], radius)
        out.append(shift_reflect(f, -dy, -dx))
    return out


# -- network ---------------------------------------------------------------------

class UpsampleHead(nn.Module):
    """log2(upscale) stages of pixel-shuffle x2 -> 3x3 -> GELU (+ 1x1-mixed skip), then 3x3 to c_raw."""

    def __init__(self, width, out_channels, skip_channels, upscale):
        super().__init__()
        if upscale < 1 or upscale & (upscale - 1):
            raise ValueError(f"upscale must be a power of 2, got {upscale}")
        self.n_stages = int(math.log2(upscale))
        self.convs = nn.ModuleList(conv3x3(width // 4, width) for _ in range(self.n_stages))
        self.skip_mix = nn.ModuleList(conv1x1(skip_channels, width) for _ in range(self.n_stages))
        self.out = conv3x3(width, out_channels)

    def forward(self, x, skips):
        if len(skips) != self.n_stages:
            raise ValueError(f"head expects {self.n_stages} skips, got {len(skips)}")
        for conv, mix, skip in zip(self.convs, self.skip_mix, skips):
            x = F.gelu(conv(F.pixel_shuffle(x, 2)))
            if skip.shape[-2:] != x.shape[-2:]:
                raise ValueError(f"skip at {tuple(skip.shape[-2:])} does not match stage {tuple(x.shape[-2:])}")
            x = x + mix(skip)
        return self.out(x)


class HLNet(nn.Module):
    """Takes preprocessed frames (B, N, 2*c_raw, H, W), returns (B, c_raw, s*H, s*W)."""

    def __init__(self, cfg: HLNetConfig):
        super().__init__()
        self.cfg = cfg
        w, cin = cfg.width, 2 * cfg.c_raw
        self.encoder = nn.Sequential(conv3x3(cin, w), nn.GELU(), conv3x3(w, w))
        # shared across frame steps
        self.fuse = conv1x1(3 * w, w)
        shared = ResidualBlock if cfg.ablation == "no_sceb" else SCEB
        self.shared = nn.ModuleList(shared(w) for _ in range(cfg.n_sceb))
        # one independent set per frame index
        if cfg.ablation == "no_hlfdb":
            def make():
                return ResidualBlock(w)
        else:
            def make():
                return HLFDB(cfg.hlfdb_cfg)
        self.nonshared = nn.ModuleList(
            nn.ModuleList(make() for _ in range(cfg.n_hlfdb)) for _ in range(cfg.n_frames)
        )
        self.head = UpsampleHead(w, cfg.c_raw, cin, cfg.upscale)

    def identity_init_(self):
        """Zero every residual-final projection; the fusion kernel passes the recurrent state."""
        for m in self.modules():
            if m is not self and hasattr(m, "zero_final_"):
                m.zero_final_()
        w = self.cfg.width
        with torch.no_grad():
            self.fuse.weight.zero_()
            self.fuse.bias.zero_()
            self.fuse.weight[:, 2 * w:] = torch.eye(w).view(w, w, 1, 1)

    def encode(self, x):
        return [self.encoder(x[:, i]) for i in range(x.shape[1])]

    def step(self, i, frame, ref, state):
        """One recurrence step for frame index i."""
        y = self.fuse(torch.cat([frame, ref, state], dim=1))
        for block in self.shared:
            y = block(y)
        for block in self.nonshared[i]:
            y = block(y)
        return y

    def recurrent_fuse(self, feats, return_steps=False):
        """state_0 = ref; state_i = nonshared_i(shared(fuse(frame_i, ref, state_{i-1})))."""
        if len(feats) != self.cfg.n_frames:
            raise ValueError(f"expected {self.cfg.n_frames} frames, got {len(feats)}")
        ref = state = feats[0]
        steps = []
        for i, frame in enumerate(feats):
            state = self.step(i, frame, ref, state)
            steps.append(state)
        return (state, steps) if return_steps else state

    def skips(self, ref_input):
        return [upsample_bilinear(ref_input, 2 ** (s + 1)) for s in range(self.head.n_stages)]

    def align(self, x):
        if self.cfg.alignment_mode == "identity":
            return x
        rows = []
        for b in range(x.shape[0]):
            frames = align_frames(list(x[b]), self.cfg.alignment_mode)
            rows.append(torch.stack(frames))
        return torch.stack(rows)

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.cfg.n_frames or x.shape[2] != 2 * self.cfg.c_raw:
            raise ValueError(
                f"expected (B, {self.cfg.n_frames}, {2 * self.cfg.c_raw}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        m = self.cfg.spatial_multiple
        ph, pw = -h % m, -w % m
        if ph or pw:
            x = F.pad(x.flatten(0, 1), (0, pw, 0, ph), mode="reflect").unflatten(0, x.shape[:2])
        x = self.align(x)
        feat = self.recurrent_fuse(self.encode(x))
        out = self.head(feat, self.skips(x[:, 0]))
        s = self.cfg.upscale
        return out[..., :h * s, :w * s]


def init_params(cfg: HLNetConfig, seed: int = 0, dtype=torch.float32) -> HLNet:
    """Deterministic fan-in scaled init with identity-at-init residual paths."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = HLNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    model.identity_init_()
    return model.to(dtype)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def recurrent_fuse(frames, model: HLNet, return_steps=False):
    return model.recurrent_fuse(frames, return_steps=return_steps)


def upsample_head(feat, skips, model: HLNet):
    return model.head(feat, skips)


def forward(seq: BracketSequence, model: HLNet, clamp: bool = False) -> torch.Tensor:
    """Restore one bracket; returns (c_raw, s*H, s*W)."""
    cfg = model.cfg
    if len(seq.frames) != cfg.n_frames:
        raise ValueError(f"bracket has {len(seq.frames)} frames, model expects {cfg.n_frames}")
    raw = seq.stack()
    if raw.shape[1] != cfg.c_raw:
        raise ValueError(f"bracket has {raw.shape[1]} channels, model expects {cfg.c_raw}")
    dtype = next(model.parameters()).dtype
    x = preprocess_frames(raw.to(dtype), seq.exposure_times, cfg.gamma)
    out = model(x.unsqueeze(0))[0]
    return out.clamp(0.0, 1.0) if clamp else out
