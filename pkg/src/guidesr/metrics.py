"""Full-reference metrics, metric reports and radar-chart export."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .losses import PerceptualNet, lpips_loss

PSNR_CAP = 100.0
LUMA = (0.299, 0.587, 0.114)
# metric -> True when higher is better
ORIENTATION = {"psnr": True, "ssim": True, "lpips": False, "fid": False}
METRICS = tuple(ORIENTATION)


def _as_batch(x) -> torch.Tensor:
    # arrays are H x W x 3, tensors are (N,) 3 x H x W
    if not isinstance(x, torch.Tensor):
        x = np.asarray(x)
        x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(x, -1, -3) if x.ndim >= 3 else x))
    t = x.detach().to(torch.float64)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4:
        raise ValueError(f"expected an image or image batch, got shape {tuple(t.shape)}")
    return t


def _pair(r, y):
    r, y = _as_batch(r), _as_batch(y)
    if r.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(y.shape)}")
    return r, y


def psnr(r, y) -> float:
    r, y = _pair(r, y)
    mse = (r - y).pow(2).mean().item()
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-ax**2 / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(r, y, window_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Mean SSIM of the luminance channel over valid (unpadded) windows."""
    r, y = _pair(r, y)
    if min(r.shape[-2:]) < window_size:
        raise ValueError(f"image {tuple(r.shape[-2:])} smaller than the {window_size}x{window_size} window")
    w = r.new_tensor(LUMA)[None, :, None, None]
    a, b = (r * w).sum(1, keepdim=True), (y * w).sum(1, keepdim=True)
    win = gaussian_window(window_size, sigma)[None, None]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = F.conv2d(a, win), F.conv2d(b, win)
    var_a = F.conv2d(a * a, win) - mu_a**2
    var_b = F.conv2d(b * b, win) - mu_b**2
    cov = F.conv2d(a * b, win) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return s.mean().item()


@torch.no_grad()
def perceptual_distance(r, y, phi: PerceptualNet) -> float:
    r, y = _pair(r, y)
    dtype = next(phi.parameters()).dtype
    return lpips_loss(r.to(dtype), y.to(dtype), phi).item()


@torch.no_grad()
def phi_features(images, phi: PerceptualNet) -> np.ndarray:
    """Globally pooled Φ features, one row per image."""
    x = _as_batch(images).to(next(phi.parameters()).dtype)
    return torch.cat([f.mean(dim=(2, 3)) for f in phi(x)], dim=1).double().numpy()


def _sqrtm_psd(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.where(vals < 1e-8, np.maximum(vals, 0.0), vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance_from_stats(mu1, sigma1, mu2, sigma2) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if np.linalg.eigvalsh(s1).min() < 1e-12 or np.linalg.eigvalsh(s2).min() < 1e-12:
        eye = np.eye(s1.shape[0])
        s1, s2 = s1 + 1e-6 * eye, s2 + 1e-6 * eye
    # Tr((S1 S2)^1/2) == Tr((S1^1/2 S2 S1^1/2)^1/2), and the latter is symmetric PSD
    root1 = _sqrtm_psd(s1)
    inner = np.linalg.eigvalsh(root1 @ s2 @ root1)
    tr_covmean = np.sqrt(np.clip(inner, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_covmean, 0.0))


def frechet_distance(features_a, features_b) -> float:
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per feature set")
    return frechet_distance_from_stats(
        a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False),
    )


@dataclass
class MetricReport:
    dataset_id: str
    model_id: str
    per_image: list[dict] = field(default_factory=list)
    set_metrics: dict = field(default_factory=dict)
    iteration: int | None = None

    @property
    def aggregate(self) -> dict:
        out = {}
        for m in ("psnr", "ssim", "lpips"):
            vals = [row[m] for row in self.per_image if m in row]
            if vals:
                out[m] = math.fsum(vals) / len(vals)
        out.update(self.set_metrics)
        return out

    def to_dict(self):
        return {
            "dataset_id": self.dataset_id, "model_id": self.model_id, "iteration": self.iteration,
            "per_image": self.per_image, "set_metrics": self.set_metrics, "aggregate": self.aggregate,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["dataset_id"], d["model_id"], d["per_image"], d.get("set_metrics", {}), d.get("iteration"))


def score_pairs(preds, targets, phi: PerceptualNet, dataset_id="", model_id="", indices=None) -> MetricReport:
    """Metrics for aligned lists of (1, 3, H, W) predictions and targets."""
    if len(preds) != len(targets):
        raise ValueError("prediction and target counts differ")
    indices = list(range(len(preds))) if indices is None else list(indices)
    report = MetricReport(dataset_id, model_id)
    for i, r, y in zip(indices, preds, targets):
        report.per_image.append({
            "index": i, "psnr": psnr(r, y), "ssim": ssim(r, y), "lpips": perceptual_distance(r, y, phi),
        })
    if len(preds) >= 2:
        fa = np.concatenate([phi_features(p, phi) for p in preds])
        fb = np.concatenate([phi_features(t, phi) for t in targets])
        report.set_metrics["fid"] = frechet_distance(fa, fb)
    return report


@torch.no_grad()
def evaluate(model, dataset, phi: PerceptualNet | None = None, model_id="model", indices=None) -> MetricReport:
    """Run the model on every (or the selected) LR input of ``dataset`` and score R1 against HR."""
    phi = phi or PerceptualNet()
    was_training = model.training
    model.eval()
    preds, targets = [], []
    indices = range(len(dataset)) if indices is None else indices
    for i in indices:
        inp, hr = dataset.model_input(i), dataset.hr(i)
        r1, _ = model(inp.to(next(model.parameters()).dtype))
        preds.append(r1.float())
        targets.append(hr)
    model.train(was_training)
    if not preds:
        raise ValueError("dataset has no pairs to evaluate")
    return score_pairs(preds, targets, phi, dataset.dataset_id, model_id, list(indices))


def export_radar(reports: list[MetricReport], metrics=METRICS) -> list[dict]:
    """Per-metric min-max normalisation across reports, oriented so 1 is best."""
    if not reports:
        raise ValueError("need at least one report")
    aggs = [r.aggregate for r in reports]
    rows = [{"model": r.model_id, "dataset": r.dataset_id} for r in reports]
    for m in metrics:
        vals = [a.get(m) for a in aggs]
        present = [v for v in vals if v is not None]
        lo, hi = (min(present), max(present)) if present else (None, None)
        for row, v in zip(rows, vals):
            if v is None:
                row[m] = None
            elif hi == lo:
                row[m] = 0.5
            else:
                norm = (v - lo) / (hi - lo)
                row[m] = norm if ORIENTATION[m] else 1.0 - norm
    return rows


def aggregate_table(reports: list[MetricReport], metrics=METRICS) -> list[dict]:
    rows = []
    for r in reports:
        agg = r.aggregate
        rows.append({"model": r.model_id, "dataset": r.dataset_id, **{m: agg.get(m) for m in metrics}})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)) for k, v in row.items()})
    return buf.getvalue()
