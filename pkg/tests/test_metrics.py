import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import micro_config, natural_images
from guidesr.data import PairDataset
from guidesr.losses import PerceptualNet
from guidesr.metrics import (MetricReport, aggregate_table, evaluate, export_radar, frechet_distance,
                             frechet_distance_from_stats, perceptual_distance, psnr, rows_to_csv, ssim)
from guidesr.model import build_model


def gray(v, size=32):
    return np.full((size, size, 3), v, dtype=np.float64)


def test_psnr_fixtures():
    y = gray(0.5)
    assert psnr(y, y) == 100.0
    assert math.isclose(psnr(y + 0.1, y), 20.0, abs_tol=1e-9)
    assert math.isclose(psnr(y + 0.01, y), 40.0, abs_tol=1e-9)


def test_psnr_decreases_with_noise():
    y = natural_images()[1][:64, :64]
    rng = np.random.default_rng(0)
    n = rng.standard_normal(y.shape)
    values = [psnr(y + s * n, y) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(gray(0.1, 16), gray(0.1, 32))


def test_ssim_identity_and_constant_closed_form():
    y = natural_images()[0][:64, :64]
    assert math.isclose(ssim(y, y), 1.0, abs_tol=1e-12)
    # constant images: variances vanish, only the luminance term remains
    c1, c2 = 0.01**2, 0.03**2
    expected = (2 * 0.3 * 0.7 + c1) / (0.3**2 + 0.7**2 + c1) * (c2 / c2)
    assert math.isclose(ssim(gray(0.3), gray(0.7)), expected, abs_tol=1e-9)
    assert math.isclose(expected, 0.724185, abs_tol=1e-6)


def test_ssim_symmetric_and_window_check():
    a, b = natural_images()[0][:32, :32], natural_images()[1][:32, :32]
    assert math.isclose(ssim(a, b), ssim(b, a), abs_tol=1e-12)
    with pytest.raises(ValueError):
        ssim(gray(0.1, 8), gray(0.2, 8))


def test_perceptual_distance_matches_training_loss_role():
    phi = PerceptualNet((4, 4, 4))
    a, b = natural_images()[0][:32, :32], natural_images()[1][:32, :32]
    assert perceptual_distance(a, a, phi) == 0
    assert perceptual_distance(a, b, phi) > 0


def test_frechet_fixtures():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((400, 3))
    x = (x - x.mean(0)) / x.std(0, ddof=1)
    assert frechet_distance(x, x) < 1e-9
    # a pure unit mean shift in one coordinate with identical covariances gives exactly 1
    assert math.isclose(frechet_distance(x, x + np.array([1.0, 0, 0])), 1.0, abs_tol=1e-9)
    with pytest.raises(ValueError):
        frechet_distance(x[:1], x)


def test_frechet_closed_form_for_diagonal_covariances():
    s1, s2 = np.diag([1.0, 4.0]), np.diag([9.0, 1.0])
    # (1-3)^2 + (2-1)^2 for the covariance term
    assert math.isclose(frechet_distance_from_stats(np.zeros(2), s1, np.zeros(2), s2), 5.0, abs_tol=1e-9)


def test_frechet_handles_singular_covariance():
    x = np.ones((5, 3))
    assert math.isfinite(frechet_distance(x, x + 1))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_frechet_nonnegative_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((20, 3)), rng.standard_normal((25, 3)) * 2
    assert frechet_distance(a, b) >= 0
    assert math.isclose(frechet_distance(a, b), frechet_distance(b, a), rel_tol=1e-6, abs_tol=1e-9)


def report(model_id, psnr_value, fid):
    r = MetricReport("ds", model_id, per_image=[{"index": 0, "psnr": psnr_value, "ssim": 0.5, "lpips": 0.2}],
                     set_metrics={"fid": fid})
    return r


def test_radar_orientation_and_ties():
    rows = export_radar([report("a", 20.0, 10.0), report("b", 30.0, 5.0), report("c", 25.0, 7.5)])
    assert [r["psnr"] for r in rows] == [0.0, 1.0, 0.5]
    assert [r["fid"] for r in rows] == [0.0, 1.0, 0.5]
    assert all(r["ssim"] == 0.5 for r in rows)
    assert rows_to_csv(rows).splitlines()[0] == "model,dataset,psnr,ssim,lpips,fid"
    with pytest.raises(ValueError):
        export_radar([])


def test_report_save_load_and_table(tmp_path):
    r = report("a", 21.0, 3.0)
    r.iteration = 7
    r.save(tmp_path / "r.json")
    back = MetricReport.load(tmp_path / "r.json")
    assert back.aggregate == r.aggregate and back.iteration == 7
    assert aggregate_table([back])[0]["psnr"] == 21.0


def test_evaluate_identity_model_scores_bicubic(small_dataset):
    ds = PairDataset(small_dataset).subset(range(3))

    class Bicubic(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.zeros(1))

        def forward(self, x):
            return x, None

    rep = evaluate(Bicubic(), ds, PerceptualNet((4, 4, 4)), model_id="bicubic")
    expected = np.mean([psnr(ds.model_input(i), ds.hr(i)) for i in range(3)])
    assert math.isclose(rep.aggregate["psnr"], expected, rel_tol=1e-12)
    assert {"psnr", "ssim", "lpips", "fid"} <= set(rep.aggregate)


def test_evaluate_real_model_runs(small_dataset):
    ds = PairDataset(small_dataset).subset([0, 1])
    rep = evaluate(build_model(micro_config()), ds, PerceptualNet((4, 4, 4)))
    assert len(rep.per_image) == 2
