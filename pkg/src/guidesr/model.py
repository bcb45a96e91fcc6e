from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .diffusion import DiffusionBranch
from .guidance import GuidanceBranch


def check_image(image: torch.Tensor, multiple: int = 8) -> None:
    """Validate an (N, 3, H, W) batch in [0, 1] at model entry."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) image batch, got shape {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % multiple or w % multiple:
        raise ValueError(f"image size {h}x{w} must be divisible by {multiple}")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")


class GuideSR(nn.Module):
    """Dual-branch one-step SR model. ``forward`` returns ``(R1, R2)``; R2 is None without guidance."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.guidance = GuidanceBranch(cfg) if cfg.use_guidance else None
        self.diffusion = DiffusionBranch(cfg)

    def forward(self, image):
        check_image(image, self.cfg.spatial_multiple)
        if self.guidance is not None:
            r2, pyr = self.guidance(image)
        else:
            r2, pyr = None, None
        return self.diffusion(image, pyr), r2


def build_model(cfg: ModelConfig, seed: int = 0) -> GuideSR:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GuideSR(cfg)


def upsample(lr: torch.Tensor, scale: int) -> torch.Tensor:
    """Bicubic pre-upsampling of LR input to model resolution, clamped to [0, 1]."""
    if scale == 1:
        return lr.clone()
    out = F.interpolate(lr, scale_factor=scale, mode="bicubic", align_corners=False)
    return out.clamp(0.0, 1.0)


def pad_to_multiple(image: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = image.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(image, (0, pw, 0, ph), mode=mode), (h, w)
