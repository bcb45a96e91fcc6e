"""Low-rank adapters on frozen conv/linear weights.

A conv weight of shape (out, in, kh, kw) is treated as a d x k matrix with
d = out and k = in * kh * kw; the update is ``scaling * B @ A`` reshaped back.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class LoraError(RuntimeError):
    pass


def weight_matrix_shape(weight: torch.Tensor) -> tuple[int, int]:
    return weight.shape[0], weight[0].numel()


def rank_is_eligible(weight: torch.Tensor, rank: int) -> bool:
    d, k = weight_matrix_shape(weight)
    return 2 * rank <= min(d, k)


class LoraAdapter(nn.Module):
    def __init__(self, base_name: str, d: int, k: int, rank: int, alpha: float | None = None):
        super().__init__()
        if rank < 1 or rank > min(d, k):
            raise LoraError(f"rank {rank} invalid for a {d}x{k} weight ({base_name})")
        self.base_name = base_name
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.A = nn.Parameter(torch.empty(rank, k))
        self.B = nn.Parameter(torch.zeros(d, rank))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.B @ self.A)

    def extra_repr(self):
        return f"{self.base_name}, rank={self.rank}, alpha={self.alpha}"


def effective_weight(weight: torch.Tensor, adapter: LoraAdapter | None) -> torch.Tensor:
    if adapter is None:
        return weight
    return weight + adapter.delta().view_as(weight)


class LoraConv2d(nn.Conv2d):
    lora: LoraAdapter

    def forward(self, x):
        return self._conv_forward(x, effective_weight(self.weight, self.lora), self.bias)


class LoraLinear(nn.Linear):
    lora: LoraAdapter

    def forward(self, x):
        return F.linear(x, effective_weight(self.weight, self.lora), self.bias)


_WRAPPERS = {nn.Conv2d: LoraConv2d, nn.Linear: LoraLinear}


def _wrap(module: nn.Module, adapter: LoraAdapter) -> nn.Module:
    # reuse the same Parameter objects so base names and values are untouched
    cls = _WRAPPERS[type(module)]
    wrapped = cls.__new__(cls)
    wrapped.__dict__ = module.__dict__.copy()
    wrapped._modules = dict(module._modules)
    wrapped.lora = adapter
    return wrapped


def apply_lora(base_weights: dict[str, torch.Tensor], adapters) -> dict[str, torch.Tensor]:
    """Return ``W + (alpha/r) B A`` for every adapted weight; inputs are never mutated."""
    out = dict(base_weights)
    for adapter in adapters:
        if adapter.base_name not in base_weights:
            raise LoraError(f"no base weight named {adapter.base_name}")
        w = base_weights[adapter.base_name]
        d, k = weight_matrix_shape(w)
        if adapter.B.shape != (d, adapter.rank) or adapter.A.shape != (adapter.rank, k):
            raise LoraError(
                f"adapter shapes B{tuple(adapter.B.shape)} A{tuple(adapter.A.shape)} do not match {d}x{k} "
                f"weight {adapter.base_name}"
            )
        delta = adapter.scaling * (adapter.B.to(w.dtype) @ adapter.A.to(w.dtype))
        out[adapter.base_name] = w + delta.view_as(w)
    return out


def adapters_of(model: nn.Module) -> list[LoraAdapter]:
    return [m for m in model.modules() if isinstance(m, LoraAdapter)]


def has_lora(model: nn.Module) -> bool:
    return any(isinstance(m, LoraAdapter) for m in model.modules())


def inject(root: nn.Module, prefix: str, rank: int, alpha, skip) -> list[LoraAdapter]:
    """Wrap every eligible Conv2d/Linear below ``root`` with an adapter of ``rank``.

    ``skip(name)`` excludes submodules by their path relative to ``root``;
    layers too narrow for the rank (2r > min(d, k)) are left without an adapter.
    """
    adapters = []
    targets = [
        (name, m) for name, m in root.named_modules()
        if type(m) in _WRAPPERS and not skip(name)
    ]
    for name, module in targets:
        if not rank_is_eligible(module.weight, rank):
            continue
        d, k = weight_matrix_shape(module.weight)
        adapter = LoraAdapter(f"{prefix}.{name}.weight", d, k, rank, alpha)
        adapter.to(module.weight.device, module.weight.dtype)
        parent_name, _, attr = name.rpartition(".")
        parent = root.get_submodule(parent_name) if parent_name else root
        setattr(parent, attr, _wrap(module, adapter))
        adapters.append(adapter)
    return adapters


def attach_lora(model, cfg) -> list[LoraAdapter]:
    """Freeze the VAE/UNet bases and attach rank-``r_u`` / ``r_v`` adapters.

    Fusion layers added on top of the prior (guidance fuse convs, VAE skip
    zero-convs, UNet output head, prompt module) stay fully trainable.
    """
    diffusion = model.diffusion
    if has_lora(diffusion):
        raise LoraError("LoRA adapters are already attached")
    for root in (diffusion.unet, diffusion.vae):
        for name, p in root.named_parameters():
            p.requires_grad_(root.is_fusion(name))
    adapters = inject(
        diffusion.unet, "diffusion.unet", cfg.lora_rank_unet, cfg.lora_alpha,
        skip=diffusion.unet.is_fusion,
    )
    adapters += inject(
        diffusion.vae, "diffusion.vae", cfg.lora_rank_vae, cfg.lora_alpha,
        skip=diffusion.vae.is_fusion,
    )
    return adapters
