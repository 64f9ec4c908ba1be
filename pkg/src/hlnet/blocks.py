"""Learnable blocks: SCConv (simplified), SCEB, local/global frequency branches, HLFDB."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from hlnet.freqops import dwt_haar, idwt_haar, mswf_fuse, split_high_low, upsample_bilinear

VARIANTS = ("standard", "local_only", "global_only", "wavelet_split")


@dataclass
class HLFDBConfig:
    width: int = 16
    pool_k: int = 2
    n_dense_layers: int = 4
    n_scales: int = 3
    n_heads: int = 2
    variant: str = "standard"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown HLFDB variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.width % self.n_heads:
            raise ValueError(f"width {self.width} not divisible by n_heads {self.n_heads}")
        if self.pool_k < 1:
            raise ValueError("pool_k must be >= 1")

    @property
    def spatial_multiple(self) -> int:
        """Input H and W must be multiples of this."""
        k = 2 if self.variant == "wavelet_split" else self.pool_k
        return k * 2 ** (self.n_scales - 1)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def conv1x1(cin, cout):
    return nn.Conv2d(cin, cout, 1)


def _zero_(conv: nn.Conv2d) -> None:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def _check_channels(x: torch.Tensor, width: int, name: str) -> None:
    if x.dim() != 4 or x.shape[1] != width:
        raise ValueError(f"{name}: expected (B, {width}, H, W), got {tuple(x.shape)}")


class ChannelNorm(nn.Module):
    """Per-sample, per-channel normalization over spatial positions, with scale and shift."""

    def __init__(self, width, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x):
        mean = x.mean(dim=(-2, -1), keepdim=True)
        var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
        y = (x - mean) / torch.sqrt(var + self.eps)
        return y * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class SpatialGate(nn.Module):
    """Splits each channel into informative / less-informative parts by a sigmoid gate.

    The gate is the per-channel normalized response scaled by the softmax of the
    normalization's learned scales (times C, so uniform scales give weight 1).
    The two parts are cross-recombined across channel halves.
    """

    def __init__(self, width):
        super().__init__()
        if width % 2:
            raise ValueError("SpatialGate needs an even channel count")
        self.norm = ChannelNorm(width)

    def forward(self, x):
        c = x.shape[1]
        w = torch.softmax(self.norm.weight, dim=0).view(1, -1, 1, 1) * c
        gate = torch.sigmoid(self.norm(x) * w)
        info, rest = gate * x, (1 - gate) * x
        i1, i2 = info.chunk(2, dim=1)
        r1, r2 = rest.chunk(2, dim=1)
        return torch.cat([i1 + r2, i2 + r1], dim=1)


class ChannelUnit(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.split = width // 2
        self.rich = conv3x3(self.split, width)
        self.cheap = conv1x1(width - self.split, width)
        self.mix = conv1x1(2 * width, width)

    def forward(self, x):
        a, b = x[:, :self.split], x[:, self.split:]
        return self.mix(torch.cat([self.rich(a), self.cheap(b)], dim=1))


class SCConv(nn.Module):
    """Simplified spatial/channel reconstruction convolution; shape-preserving."""

    def __init__(self, width):
        super().__init__()
        self.width = width
        self.spatial = SpatialGate(width)
        self.channel = ChannelUnit(width)

    def forward(self, x):
        _check_channels(x, self.width, "scconv")
        return self.channel(self.spatial(x))

    def zero_final_(self):
        _zero_(self.channel.mix)


class SCEB(nn.Module):
    """x + SCConv(Conv3x3(SCConv(Conv3x3(x))))"""

    def __init__(self, width):
        super().__init__()
        self.width = width
        self.conv1 = conv3x3(width, width)
        self.sc1 = SCConv(width)
        self.conv2 = conv3x3(width, width)
        self.sc2 = SCConv(width)

    def forward(self, x):
        _check_channels(x, self.width, "sceb")
        return x + self.sc2(self.conv2(self.sc1(self.conv1(x))))

    def zero_final_(self):
        self.sc2.zero_final_()


class ResidualBlock(nn.Module):
    """Plain conv-act-conv residual block used by the ablation variants."""

    def __init__(self, width):
        super().__init__()
        self.width = width
        self.conv1 = conv3x3(width, width)
        self.conv2 = conv3x3(width, width)

    def forward(self, x):
        _check_channels(x, self.width, "residual block")
        return x + self.conv2(F.gelu(self.conv1(x)))

    def zero_final_(self):
        _zero_(self.conv2)


class LFEB(nn.Module):
    """Densely connected 3x3 stack with a 1x1 projection and residual."""

    def __init__(self, width, n_layers=4, growth=None):
        super().__init__()
        self.width = width
        growth = growth or max(width // 2, 1)
        self.layers = nn.ModuleList(conv3x3(width + j * growth, growth) for j in range(n_layers))
        self.proj = conv1x1(width + n_layers * growth, width)

    def forward(self, x):
        _check_channels(x, self.width, "lfeb")
        feats = [x]
        for layer in self.layers:
            feats.append(F.gelu(layer(torch.cat(feats, dim=1))))
        return x + self.proj(torch.cat(feats, dim=1))

    def zero_final_(self):
        _zero_(self.proj)


class ChannelSelfAttention(nn.Module):
    """Transposed (channel-to-channel) multi-head self-attention with residual.

    Attention maps are (C/heads x C/heads) per head regardless of image size.
    """

    def __init__(self, width, n_heads=1):
        super().__init__()
        if width % n_heads:
            raise ValueError(f"width {width} not divisible by n_heads {n_heads}")
        self.width = width
        self.n_heads = n_heads
        self.norm = ChannelNorm(width)
        self.qkv = conv1x1(width, 3 * width)
        self.temperature = nn.Parameter(torch.ones(n_heads, 1, 1))
        self.proj = conv1x1(width, width)

    def _heads(self, t):
        b, c, h, w = t.shape
        return t.reshape(b, self.n_heads, c // self.n_heads, h * w)

    def _qkv(self, x):
        _check_channels(x, self.width, "channel_self_attention")
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        q = F.normalize(self._heads(q), dim=-1)
        k = F.normalize(self._heads(k), dim=-1)
        return q, k, self._heads(v)

    def attention(self, x):
        """Per-head attention maps, shape (B, heads, C/heads, C/heads); rows sum to 1."""
        q, k, _ = self._qkv(x)
        return torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)

    def forward(self, x):
        q, k, v = self._qkv(x)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        out = (attn @ v).reshape(x.shape)
        return x + self.proj(out)

    def zero_final_(self):
        _zero_(self.proj)


class WaveletFusion(nn.Module):
    """Learnable 1x1 mix used by :func:`hlnet.freqops.mswf_fuse`.

    Initialized to pass the LL band through and add a fan-in scaled
    contribution of the coarse map.
    """

    def __init__(self, width):
        super().__init__()
        self.width = width
        self.weight = nn.Parameter(torch.empty(width, 2 * width, 1, 1))
        self.bias = nn.Parameter(torch.zeros(width))
        self.reset_parameters()

    def reset_parameters(self):
        c = self.width
        with torch.no_grad():
            nn.init.kaiming_uniform_(self.weight[:, :c], a=5 ** 0.5)
            self.weight[:, c:] = torch.eye(c).view(c, c, 1, 1)
            self.bias.zero_()

    def pass_through_(self):
        with torch.no_grad():
            self.weight[:, :self.width].zero_()
            self.bias.zero_()

    def forward(self, small, large):
        return mswf_fuse(small, large, self.weight, self.bias)


class GFEB(nn.Module):
    """Multi-scale channel attention ladder merged back up through wavelet fusion."""

    def __init__(self, width, n_scales=3, n_heads=1):
        super().__init__()
        self.width = width
        self.n_scales = n_scales
        self.attn = nn.ModuleList(ChannelSelfAttention(width, n_heads) for _ in range(n_scales))
        self.down = nn.ModuleList(conv3x3(width, width, stride=2) for _ in range(n_scales - 1))
        self.fuse = nn.ModuleList(WaveletFusion(width) for _ in range(n_scales - 1))

    def forward(self, x):
        _check_channels(x, self.width, "gfeb")
        m = 2 ** (self.n_scales - 1)
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ValueError(f"gfeb: spatial dims {tuple(x.shape[-2:])} not divisible by {m}")
        levels = []
        for i, attn in enumerate(self.attn):
            x = attn(x)
            levels.append(x)
            if i < self.n_scales - 1:
                x = self.down[i](x)
        y = levels[-1]
        for i in reversed(range(self.n_scales - 1)):
            y = self.fuse[i](y, levels[i])
        return y


class HLFDB(nn.Module):
    """High/low frequency decomposition block.

    standard:      high -> LFEB, pooled low -> GFEB -> bilinear up
    local_only:    both branches LFEB
    global_only:   both branches GFEB
    wavelet_split: Haar LL -> GFEB, (LH, HL, HH) -> LFEB, recombined by inverse Haar
    Branches are merged by a 1x1 kernel and added to the input.
    """

    def __init__(self, cfg: HLFDBConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width

        def local(width=w):
            return LFEB(width, cfg.n_dense_layers)

        def glob():
            return GFEB(w, cfg.n_scales, cfg.n_heads)

        if cfg.variant == "standard":
            self.high_branch, self.low_branch = local(), glob()
        elif cfg.variant == "local_only":
            self.high_branch, self.low_branch = local(), local()
        elif cfg.variant == "global_only":
            self.high_branch, self.low_branch = glob(), glob()
        else:
            self.high_branch, self.low_branch = local(3 * w), glob()
        merge_in = w if cfg.variant == "wavelet_split" else 2 * w
        self.merge = conv1x1(merge_in, w)

    def forward(self, x):
        _check_channels(x, self.cfg.width, "hlfdb")
        m = self.cfg.spatial_multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ValueError(f"hlfdb: spatial dims {tuple(x.shape[-2:])} not divisible by {m}")
        if self.cfg.variant == "wavelet_split":
            bands = dwt_haar(x)
            low = self.low_branch(bands.ll)
            details = self.high_branch(torch.cat([bands.lh, bands.hl, bands.hh], dim=1))
            lh, hl, hh = details.chunk(3, dim=1)
            return x + self.merge(idwt_haar(bands._replace(ll=low, lh=lh, hl=hl, hh=hh)))
        split = split_high_low(x, self.cfg.pool_k)
        high = self.high_branch(split.high)
        low = upsample_bilinear(self.low_branch(split.low), self.cfg.pool_k)
        return x + self.merge(torch.cat([high, low], dim=1))

    def zero_final_(self):
        _zero_(self.merge)
