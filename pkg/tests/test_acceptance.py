"""Acceptance checks for the package, one test per criterion.

Every test records PASS/FAIL with a short detail line; the lines are printed in
the terminal summary (see ``conftest.pytest_terminal_summary``).
"""
import json
import math
import time

import numpy as np
import pytest
import torch

import conftest
import oracles
from conftest import micro_config, natural_images, rand_image
from guidesr.cli import main
from guidesr.config import TrainConfig, toy_model_config, toy_train_config
from guidesr.data import PairDataset
from guidesr.degradation import DegradationConfig, DegradationTrace, replay, synth_dataset
from guidesr.guidance import pixel_shuffle, pixel_unshuffle
from guidesr.images import quantize, read_image, write_image
from guidesr.lora import adapters_of, attach_lora
from guidesr.losses import Discriminator, PerceptualNet, discriminator_loss, final_loss, gan_loss_d, \
    weighted_branch_loss
from guidesr.metrics import frechet_distance_from_stats, psnr, ssim
from guidesr.model import build_model
from guidesr.train import build_training, fit, lr_schedule, make_optimizers, pretrain_vae, train_step, vae_state


def record(n, ok, detail):
    conftest.ACCEPTANCE.append((n, bool(ok), detail))
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def sources(tmp_path_factory):
    from skimage import data

    d = tmp_path_factory.mktemp("acc_sources")
    for name in ("astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry", "hubble_deep_field",
                 "retina", "colorwheel"):
        img = getattr(data, name)()
        if img.ndim == 2:
            img = np.stack([img] * 3, -1)
        write_image(d / f"{name}.png", img[..., :3].astype(np.float32) / 255.0)
    return d


def test_criterion_01_identity_at_init():
    start = time.time()
    model = build_model(toy_model_config(), seed=0)
    gen = torch.Generator().manual_seed(1)
    bad = 0
    for i in range(20):
        h, w = 32 * int(torch.randint(1, 4, (1,), generator=gen)), 32 * int(torch.randint(1, 4, (1,), generator=gen))
        image = torch.rand(int(torch.randint(1, 3, (1,), generator=gen)), 3, h, w, generator=gen)
        with torch.no_grad():
            r1, r2 = model(image)
            auto = model.diffusion.vae_decode(*model.diffusion.vae_encode(image))
        bad += not (torch.equal(r2, image) and torch.equal(r1, auto))
    elapsed = time.time() - start
    record(1, bad == 0 and elapsed < 60, f"{20 - bad}/20 inputs exact, {elapsed:.1f}s")


def test_criterion_02_pixel_unshuffle_round_trip():
    start = time.time()
    gen = torch.Generator().manual_seed(2)
    bad = 0
    for _ in range(100):
        s = int([1, 2, 4, 8, 16][int(torch.randint(5, (1,), generator=gen))])
        n, c = int(torch.randint(1, 3, (1,), generator=gen)), int(torch.randint(1, 5, (1,), generator=gen))
        h, w = s * int(torch.randint(1, 5, (1,), generator=gen)), s * int(torch.randint(1, 5, (1,), generator=gen))
        x = torch.randn(n, c, h, w, generator=gen)
        y = pixel_unshuffle(x, s)
        ok = torch.equal(pixel_shuffle(y, s), x) and torch.equal(torch.sort(y.flatten()).values,
                                                                  torch.sort(x.flatten()).values)
        bad += not ok
    elapsed = time.time() - start
    record(2, bad == 0 and elapsed < 10, f"{100 - bad}/100 cases exact, {elapsed:.2f}s")


def test_criterion_03_gradient_correctness():
    start = time.time()
    cfg = micro_config(base_channels=2, guidance_blocks=1, fca_per_frb=1, latent_channels=2, unet_widths=(4,),
                       guidance_scales=(8,), guidance_proj_channels=(2,), vae_widths=(4, 4, 4), lora_rank_unet=2,
                       lora_rank_vae=2, d_prompt=4)
    model = oracles.randomize_(build_model(cfg).double(), scale=0.2, seed=3)
    # keep both outputs inside (0, 1) so the clamp is inactive, but give R1 real contrast:
    # a flat R1 puts the unit-normalised features of phi next to their x=0 singularity
    with torch.no_grad():
        model.diffusion.vae.dec_out.weight.mul_(2.0)
        model.diffusion.vae.dec_out.bias.fill_(0.5)
        model.guidance.ign.to_image_conv.weight.mul_(0.1)
        model.guidance.ign.to_image_conv.bias.zero_()
    disc = oracles.randomize_(Discriminator(4).double(), scale=0.2, seed=4)
    phi = PerceptualNet((4, 4, 4), eps=TrainConfig().perceptual_eps).double()
    tcfg = TrainConfig()
    image = 0.2 + 0.6 * rand_image(16, 16, dtype=torch.float64)
    target = rand_image(16, 16, seed=9, dtype=torch.float64)

    def loss():
        r1, r2 = model(image)
        return final_loss(target, r1, r2, disc, phi, tcfg)[0]

    with torch.no_grad():
        r1, r2 = model(image)
    assert 0 < r1.min() and r1.max() < 1 and 0 < r2.min() and r2.max() < 1
    assert r1.std() > 0.05
    loss().backward()
    params = list(model.parameters())
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    gen = torch.Generator().manual_seed(5)
    n_samples = 240
    step = 5e-4
    worst = 0.0
    for _ in range(n_samples):
        k = int(torch.multinomial(sizes, 1, generator=gen))
        p = params[k]
        i = int(torch.randint(p.numel(), (1,), generator=gen))
        flat = p.data.view(-1)
        orig = flat[i].item()
        # fourth-order central stencil
        with torch.no_grad():
            vals = {}
            for k in (-2, -1, 1, 2):
                flat[i] = orig + k * step
                vals[k] = loss().item()
            flat[i] = orig
        num = (vals[-2] - 8 * vals[-1] + 8 * vals[1] - vals[2]) / (12 * step)
        ana = p.grad.view(-1)[i].item()
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    elapsed = time.time() - start
    record(3, worst < 1e-4 and elapsed < 300,
           f"max relative error {worst:.2e} over {n_samples} sampled parameters, {elapsed:.1f}s")


def test_criterion_04_loss_arithmetic():
    cfg = TrainConfig()
    b = weighted_branch_loss(0.02, 0.1, 0.693147, cfg.lambda1, cfg.lambda2, cfg.lambda3)
    y = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    r1, r2 = torch.full_like(y, math.sqrt(2 / 3)), torch.full_like(y, math.sqrt(1 / 3))
    total, _ = final_loss(y, r1, r2, Discriminator(4).double(), PerceptualNet((4, 4, 4)).double(),
                          cfg.replace(lambda2=0.0, lambda3=0.0), use_gan=False)
    ok = (abs(b - 0.866574) <= 1e-6 and abs(total.item() - 1.9) < 1e-12
          and lr_schedule(0, cfg) == 0 and abs(lr_schedule(500, cfg) - 5e-5) <= 1e-12)
    record(4, ok, f"branch {b:.6f}, final {total.item():.12f}, lr(500) {lr_schedule(500, cfg):.3e}")


def test_criterion_05_lora_contract():
    start = time.time()
    cfg = toy_train_config(batch_size=2)
    model, disc, phi = build_training(toy_model_config(), cfg)
    attach_lora(model, model.cfg)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    opt_g, opt_d = make_optimizers(model, disc, cfg)
    gen = torch.Generator().manual_seed(6)
    for k in range(100):
        batch = (torch.rand(2, 3, 32, 32, generator=gen), torch.rand(2, 3, 32, 32, generator=gen))
        train_step(batch, model, disc, phi, opt_g, opt_d, cfg, k + 1)
    unchanged = all(torch.equal(p, frozen[n]) for n, p in model.named_parameters() if n in frozen)
    worst = []
    for a in adapters_of(model):
        expected = 8 if a.base_name.startswith("diffusion.unet.") else 4
        s = torch.linalg.svdvals(a.delta().detach().double())
        rank = int((s > 1e-6 * max(s[0].item(), 1e-300)).sum()) if s[0] > 0 else 0
        worst.append(rank <= expected == a.rank)
    elapsed = time.time() - start
    ok = unchanged and all(worst) and len(worst) > 0 and elapsed < 300
    record(5, ok, f"{len(frozen)} frozen tensors unchanged={unchanged}, {sum(worst)}/{len(worst)} adapters "
                  f"within rank, {elapsed:.1f}s")


def test_criterion_06_shared_discriminator():
    disc = oracles.randomize_(Discriminator(4).double(), scale=0.3, seed=7)
    gen = torch.nn.Conv2d(3, 3, 3, padding=1).double()
    x = rand_image(16, 16, dtype=torch.float64)
    y = rand_image(16, 16, seed=1, dtype=torch.float64)
    r1, r2 = torch.sigmoid(gen(x)), torch.sigmoid(gen(x) * 0.5)
    cfg = TrainConfig()
    disc.zero_grad()
    discriminator_loss(y, r1, r2, disc, cfg).backward()
    joint = [p.grad.clone() for p in disc.parameters()]
    separate = [torch.zeros_like(p) for p in disc.parameters()]
    for r, lam in ((r1, cfg.lambda_d), (r2, cfg.lambda_g)):
        disc.zero_grad()
        (lam * gan_loss_d(disc(y), disc(r.detach()))).backward()
        separate = [s + p.grad for s, p in zip(separate, disc.parameters())]
    err = max((a - b).abs().max().item() for a, b in zip(joint, separate))
    gen_clean = all(p.grad is None or p.grad.abs().sum() == 0 for p in gen.parameters())
    record(6, err <= 1e-6 and gen_clean, f"max |joint - sum| {err:.2e}, generator untouched={gen_clean}")


@pytest.mark.slow
def test_criterion_07_toy_training_trend(sources, tmp_path):
    start = time.time()
    data_dir = tmp_path / "toy"
    synth_dataset(sources, data_dir, 500, seed=0, cfg=DegradationConfig(crop_size=128))
    ds = PairDataset(data_dir)
    tcfg = toy_train_config(total_iters=2000, holdout=50, eval_every=0)
    train, hold = ds.split(tcfg.holdout)
    bicubic = float(np.mean([psnr(hold.model_input(i), hold.hr(i)) for i in range(len(hold))]))

    model, _, _ = build_training(toy_model_config(), tcfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(tcfg.seed + 2)
        pretrain_vae(model.diffusion.vae, train, tcfg)
    vae = vae_state(model)

    scores = {}
    for variant in ("baseline", "+longskip", "full"):
        ckpt = fit(ds, toy_model_config(variant=variant), tcfg, pretrained_vae=vae)
        scores[variant] = ckpt.meta["holdout_psnr_history"][-1][1]
    elapsed = time.time() - start
    slack = 0.1
    ordering = scores["full"] >= scores["+longskip"] - slack and scores["+longskip"] >= scores["baseline"] - slack
    margin = scores["full"] >= bicubic + 0.5
    detail = (f"bicubic {bicubic:.3f} dB, " + ", ".join(f"{k} {v:.3f} dB" for k, v in scores.items())
              + f"; ordering={ordering}, full-bicubic={scores['full'] - bicubic:+.3f} dB, {elapsed / 60:.1f} min")
    record(7, ordering and margin and elapsed < 4 * 3600, detail)


def test_criterion_08_degradation_determinism(sources, tmp_path):
    start = time.time()
    cfg = DegradationConfig()
    synth_dataset(sources, tmp_path / "a", 50, seed=11, cfg=cfg)
    synth_dataset(sources, tmp_path / "b", 50, seed=11, cfg=cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    replay_ok = True
    for i in range(50):
        name = f"{i:06d}"
        hr = read_image(tmp_path / "a" / "hr" / f"{name}.png")
        trace = DegradationTrace.from_dict(json.loads((tmp_path / "a" / "traces" / f"{name}.json").read_text()))
        lr = read_image(tmp_path / "a" / "lr" / f"{name}.png")
        replay_ok &= np.array_equal(quantize(replay(hr, trace)), quantize(lr))
    elapsed = time.time() - start
    record(8, identical and replay_ok and len(files) == 151 and elapsed < 120,
           f"{len(files)} files identical={identical}, replay={replay_ok}, {elapsed:.1f}s")


def test_criterion_09_metric_fixtures():
    y = np.full((32, 32, 3), 0.5)
    p = psnr(y + 0.1, y)
    img = natural_images()[0][:64, :64]
    s = ssim(img, img)
    f = frechet_distance_from_stats(np.array([0.0]), np.array([[1.0]]), np.array([1.0]), np.array([[1.0]]))
    ok = abs(p - 20.0) <= 1e-6 and s == pytest.approx(1.0, abs=1e-12) and abs(f - 1.0) <= 1e-6
    record(9, ok, f"psnr {p:.9f} dB, ssim {s:.12f}, frechet {f:.9f}")


@pytest.mark.slow
def test_criterion_10_end_to_end_determinism(sources, tmp_path):
    start = time.time()
    assert main(["synth", "--hr-dir", str(sources), "--out", str(tmp_path / "data"), "--n", "24", "--seed", "5"]) == 0
    for run in ("a", "b"):
        assert main(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / run), "--iters", "50",
                     "--seed", "7"]) == 0
    same_log = (tmp_path / "a" / "losses.log").read_bytes() == (tmp_path / "b" / "losses.log").read_bytes()
    same_ckpt = ((tmp_path / "a" / "ckpt" / "last.ckpt").read_bytes()
                 == (tmp_path / "b" / "ckpt" / "last.ckpt").read_bytes())
    n_lines = len((tmp_path / "a" / "losses.log").read_text().splitlines())
    elapsed = time.time() - start
    record(10, same_log and same_ckpt and n_lines == 50 and elapsed < 600,
           f"losses.log identical={same_log} ({n_lines} records), checkpoint identical={same_ckpt}, {elapsed:.1f}s")
