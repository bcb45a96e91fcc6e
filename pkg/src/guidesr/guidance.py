"""Full-resolution guidance branch.

Shallow conv -> transition (C -> 2C) -> FRB stack -> IGN, producing the refined
image ``R2`` and a pixel-unshuffled feature pyramid for the UNet encoder.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


def conv3x3(in_ch, out_ch, bias=True):
    return nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=bias)


def zero_(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Space-to-depth rearrangement: (N, C, H, W) -> (N, s*s*C, H/s, W/s)."""
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    h, w = x.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"spatial size {h}x{w} not divisible by {s}")
    return F.pixel_unshuffle(x, s)


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    if x.shape[-3] % (s * s):
        raise ValueError(f"channel count {x.shape[-3]} not divisible by {s * s}")
    return F.pixel_shuffle(x, s)


class FCABlock(nn.Module):
    """Feature channel attention with an inner residual.

    ``out = x + conv_out(sigmoid(attn_conv(avgpool(gelu(conv1(x))))) * x)``
    """

    def __init__(self, width):
        super().__init__()
        self.conv1 = conv3x3(width, width)
        self.attn_conv = nn.Conv2d(width, width, 1)
        self.conv_out = zero_(conv3x3(width, width))

    def gate(self, x):
        y = F.gelu(self.conv1(x))
        y = F.adaptive_avg_pool2d(y, 1)
        return torch.sigmoid(self.attn_conv(y))

    def forward(self, x):
        if x.shape[1] != self.conv1.in_channels:
            raise ValueError(f"expected {self.conv1.in_channels} channels, got {x.shape[1]}")
        return x + self.conv_out(self.gate(x) * x)


class FRB(nn.Module):
    """Full resolution block: a chain of FCA blocks inside an outer skip."""

    def __init__(self, width, n_fca):
        super().__init__()
        if n_fca < 1:
            raise ValueError("an FRB needs at least one FCA block")
        self.n_fca = n_fca
        for j in range(n_fca):
            self.add_module(f"fca{j}", FCABlock(width))

    def blocks(self):
        return [getattr(self, f"fca{j}") for j in range(self.n_fca)]

    def chain(self, x):
        for block in self.blocks():
            x = block(x)
        return x

    def forward(self, x):
        # outer skip carries the chain's delta so zero-init blocks stay an exact identity
        return x + (self.chain(x) - x)


class IGN(nn.Module):
    """Image guidance network: guided attention refinement plus the R2 image head."""

    def __init__(self, width, use_attention=True):
        super().__init__()
        self.use_attention = use_attention
        if use_attention:
            self.attn_conv1 = conv3x3(width, width)
            self.attn_conv2 = conv3x3(width, width)
            self.value_conv = conv3x3(width, width)
            self.fuse_conv = zero_(conv3x3(width, width))
        self.to_image_conv = zero_(conv3x3(width, 3))

    def attention(self, f_d):
        return torch.sigmoid(self.attn_conv2(F.gelu(self.attn_conv1(f_d))))

    def forward(self, f_d, image):
        if f_d.shape[-2:] != image.shape[-2:]:
            raise ValueError(f"feature size {tuple(f_d.shape[-2:])} != image size {tuple(image.shape[-2:])}")
        if self.use_attention:
            f_r = f_d + self.fuse_conv(self.attention(f_d) * self.value_conv(f_d))
        else:
            f_r = f_d
        r2 = torch.clamp(self.to_image_conv(f_r) + image, 0.0, 1.0)
        return f_r, r2


class GuidanceBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.cfg = cfg
        self.width = 2 * c
        self.shallow = conv3x3(3, c)
        self.transition = nn.Conv2d(c, 2 * c, 1)
        with torch.no_grad():
            eye = torch.eye(c)
            self.transition.weight.copy_(torch.cat([eye, eye], 0)[:, :, None, None])
            self.transition.bias.zero_()
        self.n_frb = cfg.guidance_blocks
        for i in range(self.n_frb):
            self.add_module(f"frb{i}", FRB(2 * c, cfg.fca_per_frb))
        self.ign = IGN(2 * c, use_attention=cfg.use_ign)
        self.scales = tuple(cfg.guidance_scales)
        for s, p in zip(cfg.guidance_scales, cfg.guidance_proj_channels):
            self.add_module(f"proj{s}", zero_(nn.Conv2d(s * s * 2 * c, p, 1)))

    def frbs(self):
        return [getattr(self, f"frb{i}") for i in range(self.n_frb)]

    def extract_shallow_features(self, image):
        if image.shape[1] != 3:
            raise ValueError(f"expected a 3-channel image, got {image.shape[1]} channels")
        return self.shallow(image)

    def frg_net(self, f0):
        if f0.shape[1] != self.cfg.base_channels:
            raise ValueError(f"expected {self.cfg.base_channels} channels, got {f0.shape[1]}")
        x = self.transition(f0)
        for frb in self.frbs():
            x = frb(x)
        return x

    def build_pyramid(self, f_r) -> dict[int, torch.Tensor]:
        if f_r.shape[1] != self.width:
            raise ValueError(f"expected {self.width} channels, got {f_r.shape[1]}")
        return {s: getattr(self, f"proj{s}")(pixel_unshuffle(f_r, s)) for s in self.scales}

    def forward(self, image):
        """Return ``(R2, pyramid)`` for an (N, 3, H, W) image batch."""
        f0 = self.extract_shallow_features(image)
        f_d = self.frg_net(f0)
        f_r, r2 = self.ign(f_d, image)
        return r2, self.build_pyramid(f_r)
