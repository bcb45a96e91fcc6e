"""Branch losses, the frozen perceptual net and the shared patch discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-7


def _same_shape(r, y):
    if r.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(y.shape)}")


class PerceptualNet(nn.Module):
    """Frozen 3-stage conv feature extractor with fixed-seed random weights.

    Each stage's features are unit-normalised over channels at every location.
    GELU rather than ReLU: a location where every ReLU channel is zero would make
    the normalised feature jump when nudged, so the loss would not be continuous.
    """

    def __init__(self, channels=(8, 16, 32), seed=1234, eps=1e-10):
        super().__init__()
        self.eps = eps
        c1, c2, c3 = channels
        self.stages = nn.ModuleList([
            nn.Conv2d(3, c1, 3, padding=1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
        ])
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.stages:
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        self.requires_grad_(False)

    def train(self, mode=True):
        # no dropout/norm layers, but keep it permanently in eval mode anyway
        return super().train(False)

    def forward(self, image):
        feats = []
        x = image * 2 - 1
        for conv in self.stages:
            x = F.gelu(conv(x))
            feats.append(x / (x.norm(dim=1, keepdim=True) + self.eps))
        return feats


class Discriminator(nn.Module):
    """PatchGAN-style critic; one parameter set scores both branch outputs."""

    def __init__(self, width=16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, image):
        return torch.sigmoid(self.body(image * 2 - 1))


def mse_loss(r, y):
    """Pixel mean of the squared per-pixel channel-vector norm (channels summed)."""
    _same_shape(r, y)
    return (r - y).pow(2).sum(dim=-3).mean()


def lpips_loss(r, y, phi: PerceptualNet):
    _same_shape(r, y)
    return sum((a - b).pow(2).sum(dim=1).mean() for a, b in zip(phi(r), phi(y)))


def gan_loss_g(fake_scores):
    return -torch.log(fake_scores + EPS).mean()


def gan_loss_d(real_scores, fake_scores):
    return -torch.log(real_scores + EPS).mean() - torch.log(1 - fake_scores + EPS).mean()


def weighted_branch_loss(mse, lpips, gan, lambda1=1.0, lambda2=5.0, lambda3=0.5):
    if min(lambda1, lambda2, lambda3) < 0:
        raise ValueError(f"loss weights must be non-negative, got {(lambda1, lambda2, lambda3)}")
    return lambda1 * mse + lambda2 * lpips + lambda3 * gan


def branch_terms(r, y, disc, phi, use_gan=True):
    terms = {"mse": mse_loss(r, y), "lpips": lpips_loss(r, y, phi)}
    terms["gan"] = gan_loss_g(disc(r)) if use_gan else r.new_zeros(())
    return terms


def branch_loss(r, y, disc, phi, lambda1=1.0, lambda2=5.0, lambda3=0.5, use_gan=True):
    t = branch_terms(r, y, disc, phi, use_gan)
    return weighted_branch_loss(t["mse"], t["lpips"], t["gan"], lambda1, lambda2, lambda3)


@dataclass
class LossReport:
    iteration: int
    mse_r1: float
    lpips_r1: float
    gan_r1: float
    loss_r1: float
    mse_r2: float = 0.0
    lpips_r2: float = 0.0
    gan_r2: float = 0.0
    loss_r2: float = 0.0
    gan_d: float = 0.0
    total: float = 0.0
    lr: float = 0.0

    def as_dict(self):
        return asdict(self)

    def is_finite(self):
        return all(torch.isfinite(torch.tensor(v)).item() for v in asdict(self).values())


def final_loss(y, r1, r2, disc, phi, cfg, use_gan=True, iteration=0):
    """``lambda_d * L_B(Y, R1) + lambda_g * L_B(Y, R2)``.

    Returns the differentiable total and a populated :class:`LossReport`.
    Without a guidance output (``r2 is None``) the total is ``L_B(Y, R1)``.
    """
    lam = (cfg.lambda1, cfg.lambda2, cfg.lambda3)
    t1 = branch_terms(r1, y, disc, phi, use_gan)
    l1 = weighted_branch_loss(t1["mse"], t1["lpips"], t1["gan"], *lam)
    report = LossReport(
        iteration=iteration,
        mse_r1=t1["mse"].item(), lpips_r1=t1["lpips"].item(), gan_r1=t1["gan"].item(), loss_r1=0.0,
    )
    # report totals are recomputed in double precision from the logged parts
    report.loss_r1 = weighted_branch_loss(report.mse_r1, report.lpips_r1, report.gan_r1, *lam)
    if r2 is None:
        total = l1
    else:
        t2 = branch_terms(r2, y, disc, phi, use_gan)
        l2 = weighted_branch_loss(t2["mse"], t2["lpips"], t2["gan"], *lam)
        total = cfg.lambda_d * l1 + cfg.lambda_g * l2
        report.mse_r2, report.lpips_r2, report.gan_r2 = t2["mse"].item(), t2["lpips"].item(), t2["gan"].item()
        report.loss_r2 = weighted_branch_loss(report.mse_r2, report.lpips_r2, report.gan_r2, *lam)
    report.total = report.loss_r1 if r2 is None else cfg.lambda_d * report.loss_r1 + cfg.lambda_g * report.loss_r2
    return total, report


def discriminator_loss(y, r1, r2, disc, cfg):
    """Shared-weight critic loss over both branch outputs; generator outputs are detached."""
    real = disc(y)
    if r2 is None:
        return gan_loss_d(real, disc(r1.detach()))
    return (cfg.lambda_d * gan_loss_d(real, disc(r1.detach()))
            + cfg.lambda_g * gan_loss_d(real, disc(r2.detach())))
