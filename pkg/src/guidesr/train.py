"""Optimisation loop: VAE pretraining, shared-critic adversarial steps and ``fit``."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import torch

from .checkpoint import Checkpoint, capture, save_checkpoint
from .config import ModelConfig, TrainConfig
from .lora import LoraAdapter, attach_lora
from .losses import Discriminator, LossReport, PerceptualNet, discriminator_loss, final_loss
from .metrics import evaluate
from .model import build_model

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, report: LossReport):
        super().__init__(f"non-finite loss at iteration {report.iteration}: {report.as_dict()}")
        self.report = report


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine annealing to 0 at ``total_iters``."""
    if not 0 <= iteration <= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if iteration < cfg.warmup_iters:
        return cfg.lr * iteration / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    if span <= 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (iteration - cfg.warmup_iters) / span))


def _generator(*keys) -> torch.Generator:
    # mixes keys into one 63-bit seed; stable across runs and platforms
    h = 1469598103934665603
    for k in keys:
        h = ((h ^ (int(k) & 0xFFFFFFFFFFFFFFFF)) * 1099511628211) & 0x7FFFFFFFFFFFFFFF
    return torch.Generator().manual_seed(h)


class CyclicSampler:
    """Epoch-wise seeded permutations; batch ``k`` is a pure function of (seed, k)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._perms: dict[int, list[int]] = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            self._perms = {epoch: torch.randperm(self.n, generator=_generator(self.seed, 1, epoch)).tolist()}
        return self._perms[epoch]

    def batch(self, k: int) -> list[int]:
        out = []
        for pos in range(k * self.batch_size, (k + 1) * self.batch_size):
            out.append(self._perm(pos // self.n)[pos % self.n])
        return out


def crop_batch(dataset, indices, crop: int, gen: torch.Generator):
    """Aligned random crops of model input and HR target."""
    inps, hrs = [], []
    for i in indices:
        inp, hr = dataset.model_input(i), dataset.hr(i)
        h, w = hr.shape[-2:]
        c = min(crop, h, w)
        top = int(torch.randint(h - c + 1, (1,), generator=gen))
        left = int(torch.randint(w - c + 1, (1,), generator=gen))
        inps.append(inp[..., top:top + c, left:left + c])
        hrs.append(hr[..., top:top + c, left:left + c])
    return torch.cat(inps), torch.cat(hrs)


def pretrain_vae(vae, dataset, cfg: TrainConfig) -> list[float]:
    """Reconstruction-only MSE pretraining of the VAE on HR crops (skip convs stay at zero)."""
    params = [p for n, p in vae.named_parameters() if cfg.vae_pretrain_skips or not vae.is_fusion(n)]
    opt = torch.optim.Adam(params, lr=cfg.vae_pretrain_lr)
    sampler = CyclicSampler(len(dataset), cfg.vae_pretrain_batch, cfg.seed + 7919)
    losses = []
    for k in range(cfg.vae_pretrain_iters):
        for g in opt.param_groups:
            g["lr"] = cfg.vae_pretrain_lr * 0.5 * (1 + math.cos(math.pi * k / cfg.vae_pretrain_iters))
        _, hr = crop_batch(dataset, sampler.batch(k), cfg.crop_size, _generator(cfg.seed, 2, k))
        latent, skips = vae.encode(hr)
        loss = (vae.decode(latent, skips if cfg.vae_pretrain_skips else None, clamp=False) - hr).pow(2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def make_optimizers(model, disc, cfg: TrainConfig):
    lora_params, other = [], []
    lora_ids = {id(p) for m in model.modules() if isinstance(m, LoraAdapter) for p in m.parameters()}
    for p in model.parameters():
        if p.requires_grad:
            (lora_params if id(p) in lora_ids else other).append(p)
    groups = [g for g in (
        {"params": lora_params, "weight_decay": 0.0},
        {"params": other, "weight_decay": cfg.weight_decay},
    ) if g["params"]]
    opt_g = torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=cfg.discriminator_lr, betas=cfg.betas,
                              weight_decay=cfg.weight_decay)
    return opt_g, opt_d


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def train_step(batch, model, disc, phi, opt_g, opt_d, cfg: TrainConfig, iteration: int) -> LossReport:
    """One critic update on (Y vs R1, R2) followed by one generator update on the final loss."""
    inp, y = batch
    lr = lr_schedule(iteration, cfg)
    _set_lr(opt_g, lr)
    _set_lr(opt_d, lr * cfg.discriminator_lr / cfg.lr if cfg.lr > 0 else 0.0)
    use_gan = iteration >= cfg.gan_start_iter

    r1, r2 = model(inp)

    d_value = 0.0
    if use_gan:
        disc.requires_grad_(True)
        opt_d.zero_grad(set_to_none=True)
        d_loss = discriminator_loss(y, r1, r2, disc, cfg)
        d_value = d_loss.item()
        if math.isfinite(d_value):
            d_loss.backward()
            opt_d.step()

    disc.requires_grad_(False)
    try:
        opt_g.zero_grad(set_to_none=True)
        total, report = final_loss(y, r1, r2, disc, phi, cfg, use_gan, iteration)
        report.gan_d, report.lr = d_value, lr
        if not report.is_finite():
            raise TrainingDivergedError(report)
        total.backward()
        opt_g.step()
    finally:
        disc.requires_grad_(True)
    return report


def build_training(model_cfg: ModelConfig, cfg: TrainConfig):
    model = build_model(model_cfg, cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 1)
        disc = Discriminator(cfg.disc_channels)
    phi = PerceptualNet(cfg.perceptual_channels, cfg.perceptual_seed, cfg.perceptual_eps)
    return model, disc, phi


def load_vae_state(model, state: dict) -> None:
    vae = model.diffusion.vae
    own = dict(vae.named_parameters())
    if set(own) != set(state):
        raise ValueError("VAE state does not match the model's VAE")
    with torch.no_grad():
        for n, p in own.items():
            p.copy_(state[n])


def vae_state(model) -> dict:
    vae = model.diffusion.vae
    return {n: p.detach().clone() for n, p in vae.named_parameters()}


def fit(dataset, model_cfg: ModelConfig, cfg: TrainConfig, run_dir=None, pretrained_vae: dict | None = None,
        progress=None) -> Checkpoint:
    """Train for ``cfg.total_iters`` steps and return the final checkpoint.

    With ``run_dir`` set, writes ``losses.log`` (one JSON record per iteration),
    ``ckpt/last.ckpt``, ``ckpt/best.ckpt`` (best holdout PSNR) and
    ``eval/report_{iter}.json``.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    train_set, holdout = dataset.split(cfg.holdout)
    model, disc, phi = build_training(model_cfg, cfg)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 2)
        if pretrained_vae is not None:
            load_vae_state(model, pretrained_vae)
        elif cfg.vae_pretrain_iters > 0:
            pretrain_vae(model.diffusion.vae, train_set, cfg)
        attach_lora(model, model_cfg)
    opt_g, opt_d = make_optimizers(model, disc, cfg)
    meta = {"variant": model_cfg.variant, "lora": True}

    def snapshot(it, extra=None):
        return capture(model, cfg, disc=disc, optimizers={"g": opt_g, "d": opt_d}, iteration=it,
                       meta={**meta, **(extra or {})})

    log_file = None
    if run_dir is not None:
        (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "losses.log", "w")

    best = -math.inf
    history = []

    def run_eval(it):
        nonlocal best
        if holdout is None:
            return
        report = evaluate(model, holdout, phi, model_id=f"{model_cfg.variant}@{it}")
        report.iteration = it
        score = report.aggregate["psnr"]
        history.append((it, score))
        if run_dir is not None:
            report.save(run_dir / "eval" / f"report_{it}.json")
        if score > best:
            best = score
            if run_dir is not None:
                save_checkpoint(snapshot(it, {"holdout_psnr": score}), run_dir / "ckpt" / "best.ckpt")

    try:
        sampler = CyclicSampler(len(train_set), cfg.batch_size, cfg.seed)
        for k in range(cfg.total_iters):
            batch = crop_batch(train_set, sampler.batch(k), cfg.crop_size, _generator(cfg.seed, 3, k))
            report = train_step(batch, model, disc, phi, opt_g, opt_d, cfg, k)
            if log_file is not None:
                log_file.write(json.dumps(report.as_dict(), sort_keys=True) + "\n")
            if progress is not None:
                progress(report)
            if cfg.eval_every and (k + 1) % cfg.eval_every == 0 and k + 1 < cfg.total_iters:
                run_eval(k + 1)
        run_eval(cfg.total_iters)
    finally:
        if log_file is not None:
            log_file.close()

    last = snapshot(cfg.total_iters, {"holdout_psnr_history": history, "best_holdout_psnr": best
                                      if history else None})
    if run_dir is not None:
        save_checkpoint(last, run_dir / "ckpt" / "last.ckpt")
    return last
