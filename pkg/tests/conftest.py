import numpy as np
import pytest
import torch

from guidesr.config import ModelConfig, toy_train_config
from guidesr.degradation import DegradationConfig, synth_dataset
from guidesr.images import write_image


def micro_config(**changes) -> ModelConfig:
    base = ModelConfig(
        base_channels=4,
        guidance_blocks=1,
        fca_per_frb=2,
        latent_channels=2,
        unet_widths=(4, 4),
        guidance_scales=(8, 16),
        guidance_proj_channels=(2, 2),
        vae_widths=(4, 4, 4),
        lora_rank_unet=2,
        lora_rank_vae=2,
        d_prompt=4,
    )
    return base.replace(**changes)


def micro_train_config(**changes):
    base = dict(
        total_iters=4, warmup_iters=1, batch_size=2, crop_size=32, vae_pretrain_iters=2,
        vae_pretrain_batch=2, eval_every=0, holdout=2, disc_channels=4, perceptual_channels=(4, 4, 4), gan_start_iter=0,
    )
    base.update(changes)
    return toy_train_config(**base)


@pytest.fixture
def micro_cfg():
    return micro_config()


def natural_images():
    """A few bundled natural photographs as float32 H x W x 3 arrays in [0, 1]."""
    from skimage import data

    out = []
    for name in ("astronaut", "chelsea", "coffee"):
        img = getattr(data, name)().astype(np.float32) / 255.0
        out.append(img[:192, :192])
    return out


@pytest.fixture(scope="session")
def source_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sources")
    for i, img in enumerate(natural_images()):
        write_image(d / f"src{i}.png", img)
    return d


@pytest.fixture(scope="session")
def small_dataset(source_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("pairs")
    synth_dataset(source_dir, out, 12, seed=3, cfg=DegradationConfig(crop_size=64))
    return out


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def rand_image(h=32, w=32, n=1, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, h, w, generator=gen, dtype=torch.float64).to(dtype)


# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance check")
