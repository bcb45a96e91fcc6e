"""Latent branch: deterministic tiny VAE with zero-conv skips, prompt module and a
one-step UNet that predicts a residual latent at a fixed timestep."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .guidance import conv3x3, zero_


def latent_skip(f_m: torch.Tensor, f_l: torch.Tensor) -> torch.Tensor:
    if f_m.shape != f_l.shape:
        raise ValueError(f"latent shapes differ: {tuple(f_m.shape)} vs {tuple(f_l.shape)}")
    return f_m + f_l


def timestep_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = float(t) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)])
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(1)])
    return emb.to(dtype)


class _FusionMixin:
    fusion_prefixes: tuple[str, ...] = ()

    def is_fusion(self, name: str) -> bool:
        head = name.split(".", 1)[0]
        return any(head.startswith(p) for p in self.fusion_prefixes)


class EncoderStage(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.conv = conv3x3(out_ch, out_ch)

    def forward(self, x):
        return F.gelu(self.conv(F.gelu(self.down(x))))


class DecoderStage(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = conv3x3(in_ch, out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.gelu(self.conv2(F.gelu(self.conv1(x))))


class TinyVAE(_FusionMixin, nn.Module):
    """Plain (non-variational) x8 autoencoder.

    ``skip{i}`` is a zero-initialised 1x1 conv adding encoder stage ``i``'s
    output to the decoder stage input at the same resolution.
    """

    fusion_prefixes = ("skip",)
    levels = 3

    def __init__(self, latent_channels, widths=(16, 32, 32)):
        super().__init__()
        self.widths = tuple(widths)
        ins = (3,) + self.widths[:-1]
        for i in range(self.levels):
            self.add_module(f"enc{i}", EncoderStage(ins[i], self.widths[i]))
            self.add_module(f"skip{i}", zero_(nn.Conv2d(self.widths[i], self.widths[i], 1)))
        self.enc_out = conv3x3(self.widths[-1], latent_channels)
        self.dec_in = conv3x3(latent_channels, self.widths[-1])
        # dec{j} consumes level 2-j and upsamples to level 1-j
        outs = (self.widths[1], self.widths[0], self.widths[0])
        for j in range(self.levels):
            self.add_module(f"dec{j}", DecoderStage(self.widths[self.levels - 1 - j], outs[j]))
        self.dec_out = conv3x3(self.widths[0], 3)

    def encode(self, image):
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"image size {h}x{w} not divisible by 8")
        skips = []
        x = image
        for i in range(self.levels):
            x = getattr(self, f"enc{i}")(x)
            skips.append(x)
        return self.enc_out(x), skips

    def decode(self, latent, skips=None, clamp=True):
        if skips is not None and len(skips) != self.levels:
            raise ValueError(f"expected {self.levels} encoder skips, got {len(skips)}")
        x = F.gelu(self.dec_in(latent))
        for j in range(self.levels):
            level = self.levels - 1 - j
            if skips is not None:
                x = x + getattr(self, f"skip{level}")(skips[level])
            x = getattr(self, f"dec{j}")(x)
        out = self.dec_out(x)
        return torch.clamp(out, 0.0, 1.0) if clamp else out

    def forward(self, image):
        latent, skips = self.encode(image)
        return self.decode(latent, skips)


class PromptExtractor(nn.Module):
    """Stand-in prompt embedding: learnable constant plus a zero-init linear map of pooled features."""

    def __init__(self, d_prompt, width=16):
        super().__init__()
        self.null = nn.Parameter(0.02 * torch.randn(d_prompt))
        self.feat = nn.Conv2d(3, width, 3, stride=2, padding=1)
        self.proj = zero_(nn.Linear(width, d_prompt))

    def forward(self, image):
        pooled = F.gelu(self.feat(image)).mean(dim=(2, 3))
        return self.null + self.proj(pooled)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, tdim):
        super().__init__()
        self.conv1 = conv3x3(in_ch, out_ch)
        self.temb = nn.Linear(tdim, out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x, temb):
        h = F.gelu(self.conv1(x) + self.temb(temb)[:, :, None, None])
        h = self.conv2(h)
        return h + (x if self.shortcut is None else self.shortcut(x))


class UNet(_FusionMixin, nn.Module):
    fusion_prefixes = ("gfuse", "head")

    def __init__(self, cfg: ModelConfig, use_guidance: bool):
        super().__init__()
        widths = tuple(cfg.unet_widths)
        self.widths = widths
        self.n_stages = len(widths)
        self.scales = tuple(cfg.guidance_scales)
        self.use_guidance = use_guidance
        self.tdim = max(widths)
        self.time1 = nn.Linear(self.tdim, self.tdim)
        self.time2 = nn.Linear(self.tdim, self.tdim)

        for i, w in enumerate(widths):
            stage = nn.Module()
            if i == 0:
                stage.in_conv = conv3x3(cfg.latent_channels, w)
            else:
                stage.down = nn.Conv2d(widths[i - 1], w, 3, stride=2, padding=1)
            stage.block = ResBlock(w, w, self.tdim)
            self.add_module(f"stage{i}", stage)
            if use_guidance:
                p = cfg.guidance_proj_channels[i]
                fuse = nn.Conv2d(w + p, w, 1)
                with torch.no_grad():
                    # identity on the UNet features; the guidance slice keeps its random init
                    # because the guidance projections themselves start at zero
                    fuse.weight[:, :w].copy_(torch.eye(w)[:, :, None, None])
                    fuse.bias.zero_()
                self.add_module(f"gfuse{i}", fuse)

        w_last = widths[-1]
        self.mid1 = ResBlock(w_last, w_last, self.tdim)
        self.film = nn.Linear(cfg.d_prompt, 2 * w_last)
        self.mid2 = ResBlock(w_last, w_last, self.tdim)

        for i in reversed(range(self.n_stages)):
            up = nn.Module()
            if i < self.n_stages - 1:
                up.upconv = conv3x3(widths[i + 1], widths[i])
            up.block = ResBlock(2 * widths[i], widths[i], self.tdim)
            self.add_module(f"up{i}", up)
        self.head = zero_(conv3x3(widths[0], cfg.latent_channels))

    def _check_pyramid(self, pyr, sizes):
        if not self.use_guidance:
            if pyr is not None:
                raise ValueError("this UNet was built without guidance injection but got a pyramid")
            return
        if pyr is None or tuple(sorted(pyr)) != tuple(sorted(self.scales)):
            got = None if pyr is None else sorted(pyr)
            raise ValueError(f"pyramid scales {got} do not match encoder scales {list(self.scales)}")
        for s, size in zip(self.scales, sizes):
            if tuple(pyr[s].shape[-2:]) != size:
                raise ValueError(f"pyramid level {s} has size {tuple(pyr[s].shape[-2:])}, stage expects {size}")

    def forward(self, f_l, t, f_p, pyr=None):
        h, w = f_l.shape[-2:]
        div = 2 ** (self.n_stages - 1)
        if h % div or w % div:
            raise ValueError(f"latent size {h}x{w} not divisible by {div}")
        self._check_pyramid(pyr, [(h >> i, w >> i) for i in range(self.n_stages)])

        temb = timestep_embedding(t, self.tdim, f_l.dtype).to(f_l.device)[None]
        temb = self.time2(F.gelu(self.time1(temb)))

        skips = []
        x = f_l
        for i in range(self.n_stages):
            stage = getattr(self, f"stage{i}")
            x = stage.in_conv(x) if i == 0 else stage.down(x)
            x = stage.block(x, temb)
            if self.use_guidance:
                x = getattr(self, f"gfuse{i}")(torch.cat([x, pyr[self.scales[i]]], dim=1))
            skips.append(x)

        x = self.mid1(x, temb)
        gamma, beta = self.film(f_p).chunk(2, dim=1)
        x = x * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]
        x = self.mid2(x, temb)

        for i in reversed(range(self.n_stages)):
            up = getattr(self, f"up{i}")
            if i < self.n_stages - 1:
                x = up.upconv(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = up.block(torch.cat([x, skips[i]], dim=1), temb)
        return self.head(F.gelu(x))


class DiffusionBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.vae = TinyVAE(cfg.latent_channels, cfg.vae_widths)
        self.prompt = PromptExtractor(cfg.d_prompt)
        self.unet = UNet(cfg, use_guidance=cfg.use_guidance)
        self.use_long_skip = cfg.use_long_skip

    def vae_encode(self, image):
        return self.vae.encode(image)

    def vae_decode(self, latent, skips=None):
        return self.vae.decode(latent, skips)

    def prompt_embed(self, image):
        return self.prompt(image)

    def unet_forward(self, f_l, f_p, pyr=None, t=None):
        return self.unet(f_l, self.cfg.fixed_timestep if t is None else t, f_p, pyr)

    def forward(self, image, pyr=None):
        f_l, skips = self.vae_encode(image)
        f_m = self.unet_forward(f_l, self.prompt_embed(image), pyr)
        f_n = latent_skip(f_m, f_l) if self.use_long_skip else f_m
        return self.vae_decode(f_n, skips)
