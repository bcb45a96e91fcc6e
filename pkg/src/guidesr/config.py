"""Model and run configuration shared by every other module."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

VARIANTS = ("baseline", "+longskip", "+guidance", "full")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    guidance_blocks: int = 4
    fca_per_frb: int = 2
    latent_channels: int = 4
    unet_widths: tuple[int, ...] = (32, 48, 64)
    guidance_scales: tuple[int, ...] = (8, 16, 32)
    guidance_proj_channels: tuple[int, ...] = (16, 16, 16)
    vae_widths: tuple[int, int, int] = (16, 32, 32)
    lora_rank_unet: int = 8
    lora_rank_vae: int = 4
    # None means alpha == rank, i.e. a LoRA scaling of 1
    lora_alpha: float | None = None
    fixed_timestep: int = 999
    d_prompt: int = 16
    upscale_factor: int = 4
    variant: str = "full"

    def __post_init__(self):
        for name in ("unet_widths", "guidance_scales", "guidance_proj_channels", "vae_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.base_channels < 1 or self.latent_channels < 1 or self.d_prompt < 1:
            raise ConfigError("channel counts must be positive")
        if self.guidance_blocks < 0:
            raise ConfigError("guidance_blocks must be >= 0")
        if self.fca_per_frb < 1:
            raise ConfigError("fca_per_frb must be >= 1")
        stages = len(self.unet_widths)
        if stages == 0:
            raise ConfigError("unet_widths must not be empty")
        if not (len(self.guidance_scales) == stages == len(self.guidance_proj_channels)):
            raise ConfigError(
                "guidance_scales, guidance_proj_channels and unet_widths must have equal length, got "
                f"{len(self.guidance_scales)}, {len(self.guidance_proj_channels)}, {stages}"
            )
        # UNet stage i runs at latent resolution / 2**i, the latent itself is at 1/8
        expected = tuple(8 * 2**i for i in range(stages))
        if self.guidance_scales != expected:
            raise ConfigError(f"guidance_scales must be {expected} to align with UNet stages")
        if len(self.vae_widths) != 3:
            raise ConfigError("vae_widths must list 3 encoder stage widths")
        if self.lora_rank_unet < 1 or self.lora_rank_vae < 1:
            raise ConfigError("LoRA ranks must be >= 1")
        # the main trunk layers must admit r <= min(d, k) / 2; narrower heads are skipped at attach time
        if 2 * self.lora_rank_unet > min(self.unet_widths):
            raise ConfigError(f"lora_rank_unet={self.lora_rank_unet} too large for UNet widths {self.unet_widths}")
        if 2 * self.lora_rank_vae > min(self.vae_widths):
            raise ConfigError(f"lora_rank_vae={self.lora_rank_vae} too large for VAE widths {self.vae_widths}")
        if self.upscale_factor < 1:
            raise ConfigError("upscale_factor must be >= 1")
        if not 0 <= self.fixed_timestep:
            raise ConfigError("fixed_timestep must be non-negative")

    @property
    def use_guidance(self) -> bool:
        return self.variant in ("+guidance", "full")

    @property
    def use_ign(self) -> bool:
        return self.variant == "full"

    @property
    def use_long_skip(self) -> bool:
        return self.variant in ("+longskip", "full")

    @property
    def spatial_multiple(self) -> int:
        """Image height and width must be divisible by this at model entry."""
        return math.lcm(8, max(self.guidance_scales))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda3: float = 0.5
    lambda_d: float = 0.9
    lambda_g: float = 0.1
    lr: float = 5e-5
    warmup_iters: int = 500
    total_iters: int = 100_000
    batch_size: int = 4
    seed: int = 0
    crop_size: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    disc_lr: float | None = None
    # adversarial terms (both steps) are switched on at this iteration
    gan_start_iter: int = 0
    disc_channels: int = 16
    perceptual_channels: tuple[int, int, int] = (8, 16, 32)
    perceptual_seed: int = 1234
    # added to the feature norm before normalising; larger values soften the normalisation in flat regions
    perceptual_eps: float = 1e-10
    vae_pretrain_iters: int = 500
    vae_pretrain_lr: float = 2e-3
    vae_pretrain_batch: int = 8
    # also fit the encoder-decoder skip convs during reconstruction pretraining
    vae_pretrain_skips: bool = False
    eval_every: int = 500
    holdout: int = 8

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "perceptual_channels", tuple(int(c) for c in self.perceptual_channels))
        self.validate()

    def validate(self) -> None:
        lambdas = (self.lambda1, self.lambda2, self.lambda3, self.lambda_d, self.lambda_g)
        if any(v < 0 for v in lambdas):
            raise ConfigError(f"loss weights must be non-negative, got {lambdas}")
        if abs(self.lambda_d + self.lambda_g - 1.0) > 1e-12:
            raise ConfigError(f"lambda_d + lambda_g must equal 1, got {self.lambda_d + self.lambda_g}")
        if self.lr < 0 or (self.disc_lr is not None and self.disc_lr < 0):
            raise ConfigError("learning rates must be non-negative")
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_size < 1:
            raise ConfigError("crop_size must be positive")

    @property
    def discriminator_lr(self) -> float:
        return self.lr if self.disc_lr is None else self.disc_lr

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def toy_model_config(**changes) -> ModelConfig:
    """Reduced widths used for CPU-scale training runs."""
    base = ModelConfig(
        base_channels=8,
        guidance_blocks=2,
        fca_per_frb=2,
        latent_channels=8,
        unet_widths=(16, 16, 16),
        guidance_proj_channels=(8, 8, 8),
        vae_widths=(16, 32, 32),
        d_prompt=16,
    )
    return base.replace(**changes)


def toy_train_config(**changes) -> TrainConfig:
    base = TrainConfig(
        lr=5e-4,
        warmup_iters=100,
        total_iters=2000,
        batch_size=4,
        crop_size=64,
        disc_lr=5e-5,
        gan_start_iter=1000,
        perceptual_eps=1.0,
        vae_pretrain_iters=3000,
        vae_pretrain_lr=3e-3,
        vae_pretrain_skips=True,
    )
    return base.replace(**changes)


def config_to_dict(cfg) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def model_config_from_dict(d: dict[str, Any]) -> ModelConfig:
    return ModelConfig(**_known_fields(ModelConfig, d))


def train_config_from_dict(d: dict[str, Any]) -> TrainConfig:
    return TrainConfig(**_known_fields(TrainConfig, d))


def _known_fields(cls, d):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return d


def config_hash(*cfgs) -> str:
    payload = json.dumps([config_to_dict(c) for c in cfgs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    """Contents of a JSON config file passed with ``--config``.

    Schema: ``{"model": {...ModelConfig}, "train": {...TrainConfig}, "degradation": {...}}``;
    every section and key is optional and falls back to the toy presets.
    """

    model: ModelConfig = field(default_factory=toy_model_config)
    train: TrainConfig = field(default_factory=toy_train_config)
    degradation: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - {"model", "train", "degradation"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = toy_model_config(**_known_fields(ModelConfig, raw.get("model", {})))
        train = toy_train_config(**_known_fields(TrainConfig, raw.get("train", {})))
        return cls(model=model, train=train, degradation=dict(raw.get("degradation", {})))
