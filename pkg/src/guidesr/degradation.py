"""Seeded second-order degradation chain for synthesising LR/HR training pairs.

Every random draw comes from a Philox stream keyed by ``(seed, image index)``
with the op index in the high counter word, so each image (and each op in
it) is reproducible independently of processing order.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.ndimage
import torch
import torch.nn.functional as F

from .images import list_images, quantize, read_image, write_image

log = logging.getLogger(__name__)

RESIZE_MODES = ("nearest", "bilinear", "bicubic")

# standard JPEG (ITU T.81 Annex K) quantisation tables
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationConfig:
    blur_prob: float = 1.0
    blur_kernel_sizes: tuple[int, ...] = (7, 9, 11, 13, 15, 17, 19, 21)
    blur_sigma_range: tuple[float, float] = (0.2, 3.0)
    second_blur_sigma_range: tuple[float, float] = (0.2, 1.5)
    aniso_prob: float = 0.5
    resize_range: tuple[float, float] = (0.15, 1.5)
    second_resize_range: tuple[float, float] = (0.3, 1.2)
    resize_modes: tuple[str, ...] = RESIZE_MODES
    resize_mode_probs: tuple[float, ...] = (0.2, 0.4, 0.4)
    noise_prob: float = 1.0
    gaussian_noise_prob: float = 0.5
    gray_noise_prob: float = 0.4
    noise_sigma_range: tuple[float, float] = (1 / 255, 30 / 255)
    second_noise_sigma_range: tuple[float, float] = (1 / 255, 25 / 255)
    poisson_scale_range: tuple[float, float] = (0.05, 3.0)
    jpeg_prob: float = 1.0
    jpeg_quality_range: tuple[int, int] = (30, 95)
    second_order_prob: float = 0.5
    final_scale: int = 4
    flip_prob: float = 0.5
    crop_size: int = 128

    def __post_init__(self):
        for f in self.__dataclass_fields__:
            v = getattr(self, f)
            if isinstance(v, list):
                object.__setattr__(self, f, tuple(v))
        self.validate()

    def validate(self):
        for name in ("blur_prob", "aniso_prob", "noise_prob", "gaussian_noise_prob", "gray_noise_prob",
                     "jpeg_prob", "second_order_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DegradationError(f"{name} must lie in [0, 1]")
        for name in ("blur_sigma_range", "second_blur_sigma_range", "resize_range", "second_resize_range",
                     "noise_sigma_range", "second_noise_sigma_range", "poisson_scale_range", "jpeg_quality_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DegradationError(f"{name} must be ordered lo <= hi, got {(lo, hi)}")
        if min(self.blur_sigma_range + self.second_blur_sigma_range) <= 0:
            raise DegradationError("blur sigmas must be positive")
        if min(self.resize_range + self.second_resize_range) <= 0:
            raise DegradationError("resize scales must be positive")
        if any(k % 2 == 0 or k < 1 for k in self.blur_kernel_sizes):
            raise DegradationError("blur kernel sizes must be odd and positive")
        if not 1 <= self.jpeg_quality_range[0] <= self.jpeg_quality_range[1] <= 100:
            raise DegradationError("jpeg qualities must lie in [1, 100]")
        if set(self.resize_modes) - set(RESIZE_MODES):
            raise DegradationError(f"resize modes must be among {RESIZE_MODES}")
        if len(self.resize_modes) != len(self.resize_mode_probs) or abs(sum(self.resize_mode_probs) - 1) > 1e-9:
            raise DegradationError("resize_mode_probs must match resize_modes and sum to 1")
        if self.final_scale < 1:
            raise DegradationError("final_scale must be >= 1")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DegradationError(f"unknown degradation fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DegradationTrace:
    seed: int
    index: int
    input_shape: tuple[int, int]
    ops: list[dict] = field(default_factory=list)

    def to_dict(self):
        return {"seed": self.seed, "index": self.index, "input_shape": list(self.input_shape), "ops": self.ops}

    @classmethod
    def from_dict(cls, d):
        return cls(d["seed"], d["index"], tuple(d["input_shape"]), list(d["ops"]))


def op_rng(seed: int, index: int, op: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for draw ``op`` of image ``index``."""
    return np.random.Generator(np.random.Philox(key=[seed, index], counter=[0, 0, stream, op]))


def _as_float(img):
    return np.asarray(img, dtype=np.float32)


# ---- individual ops ----------------------------------------------------------


def gaussian_kernel(kernel_size, sigma_x, sigma_y=None, theta=0.0) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise DegradationError(f"kernel size must be odd and positive, got {kernel_size}")
    sigma_y = sigma_x if sigma_y is None else sigma_y
    if sigma_x <= 0 or sigma_y <= 0:
        raise DegradationError("blur sigmas must be positive")
    r = kernel_size // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    c, s = np.cos(theta), np.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * (u**2 / sigma_x**2 + v**2 / sigma_y**2))
    return k / k.sum()


def gaussian_blur(img, kernel_size, sigma_x, sigma_y=None, theta=0.0):
    """Normalised anisotropic Gaussian blur with reflect padding."""
    k = gaussian_kernel(kernel_size, sigma_x, sigma_y, theta)
    img = np.asarray(img, dtype=np.float64)
    out = np.stack([scipy.ndimage.convolve(img[..., ch], k, mode="reflect") for ch in range(img.shape[-1])], -1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_to(img, size, mode="bicubic"):
    h, w = size
    if h < 1 or w < 1:
        raise DegradationError(f"degenerate output size {size}")
    if mode not in RESIZE_MODES:
        raise DegradationError(f"unknown resize mode {mode!r}")
    img = _as_float(img)
    if img.shape[:2] == (h, w):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None]
    kwargs = {} if mode == "nearest" else {"align_corners": False}
    out = F.interpolate(t, size=(h, w), mode=mode, **kwargs)
    return out[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy().copy()


def resize(img, scale, mode="bicubic"):
    if scale <= 0:
        raise DegradationError(f"scale must be positive, got {scale}")
    h, w = np.asarray(img).shape[:2]
    return resize_to(img, (int(round(h * scale)), int(round(w * scale))), mode)


def add_noise(img, kind, level, rng: np.random.Generator, gray=False):
    """Gaussian (std ``level``) or Poisson shot noise (``level`` scales the noise)."""
    if level < 0:
        raise DegradationError("noise level must be non-negative")
    img = _as_float(img)
    if level == 0:
        return img.copy()
    h, w, c = img.shape
    if kind == "gaussian":
        if gray:
            noise = np.repeat(rng.standard_normal((h, w, 1)), c, axis=2)
        else:
            noise = rng.standard_normal((h, w, c))
        noise = noise * level
    elif kind == "poisson":
        base = img.astype(np.float64)
        if gray:
            lum = base @ np.array([0.299, 0.587, 0.114])
            noise = np.repeat((rng.poisson(np.clip(lum, 0, 1) * 255.0) / 255.0 - lum)[..., None], c, axis=2)
        else:
            noise = rng.poisson(base * 255.0) / 255.0 - base
        noise = noise * level
    else:
        raise DegradationError(f"unknown noise kind {kind!r}")
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


def quality_table(base, quality):
    if not 1 <= quality <= 100:
        raise DegradationError(f"jpeg quality must lie in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1, 255)


def _rgb_to_ycc(x):
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], -1)


def _ycc_to_rgb(x):
    y, cb, cr = x[..., 0], x[..., 1] - 128.0, x[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], -1)


def _blockwise(channel, table):
    h, w = channel.shape
    blocks = channel.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3) - 128.0
    coef = scipy.fft.dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    out = scipy.fft.idctn(coef, axes=(2, 3), norm="ortho") + 128.0
    return out.transpose(0, 2, 1, 3).reshape(h, w)


def jpeg_compress(img, quality):
    """Baseline-JPEG style 8x8 DCT quantisation round trip (4:4:4, no entropy coding)."""
    luma = quality_table(LUMA_TABLE, quality)
    chroma = quality_table(CHROMA_TABLE, quality)
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = _rgb_to_ycc(x)
    out = np.stack([_blockwise(ycc[..., i], luma if i == 0 else chroma) for i in range(3)], -1)
    rgb = _ycc_to_rgb(out)[:h, :w] / 255.0
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


# ---- chain -------------------------------------------------------------------


def apply_op(img, op: dict):
    kind = op["op"]
    if kind == "blur":
        return gaussian_blur(img, op["kernel_size"], op["sigma_x"], op["sigma_y"], op["theta"])
    if kind == "resize":
        return resize_to(img, (op["height"], op["width"]), op["mode"])
    if kind == "noise":
        seed, index, k = op["stream"]
        return add_noise(img, op["kind"], op["level"], op_rng(seed, index, k, stream=1), op["gray"])
    if kind == "jpeg":
        return jpeg_compress(img, op["quality"])
    raise DegradationError(f"unknown op {kind!r} in trace")


def _choose_mode(rng, cfg):
    return str(rng.choice(cfg.resize_modes, p=cfg.resize_mode_probs))


def _sample_stage(img_shape, order, seed, index, k, cfg):
    """Sample the blur/resize/noise/jpeg parameters of one stage; returns (ops, next op index)."""
    ops = []
    h, w = img_shape
    second = order == 2

    rng = op_rng(seed, index, k)
    k += 1
    if rng.random() < cfg.blur_prob:
        lo, hi = cfg.second_blur_sigma_range if second else cfg.blur_sigma_range
        size = int(rng.choice(cfg.blur_kernel_sizes))
        sx = float(rng.uniform(lo, hi))
        if rng.random() < cfg.aniso_prob:
            sy = float(rng.uniform(lo, hi))
            theta = float(rng.uniform(-np.pi, np.pi))
        else:
            sy, theta = sx, 0.0
        ops.append({"op": "blur", "kernel_size": size, "sigma_x": sx, "sigma_y": sy, "theta": theta})

    rng = op_rng(seed, index, k)
    k += 1
    lo, hi = cfg.second_resize_range if second else cfg.resize_range
    scale = float(rng.uniform(lo, hi))
    mode = _choose_mode(rng, cfg)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) != (h, w):
        ops.append({"op": "resize", "height": nh, "width": nw, "mode": mode})

    rng = op_rng(seed, index, k)
    if rng.random() < cfg.noise_prob:
        gray = bool(rng.random() < cfg.gray_noise_prob)
        if rng.random() < cfg.gaussian_noise_prob:
            lo, hi = cfg.second_noise_sigma_range if second else cfg.noise_sigma_range
            ops.append({"op": "noise", "kind": "gaussian", "level": float(rng.uniform(lo, hi)), "gray": gray,
                        "stream": [seed, index, k]})
        else:
            lo, hi = cfg.poisson_scale_range
            ops.append({"op": "noise", "kind": "poisson", "level": float(rng.uniform(lo, hi)), "gray": gray,
                        "stream": [seed, index, k]})
    k += 1

    rng = op_rng(seed, index, k)
    k += 1
    if rng.random() < cfg.jpeg_prob:
        lo, hi = cfg.jpeg_quality_range
        ops.append({"op": "jpeg", "quality": int(rng.integers(lo, hi + 1))})
    return ops, (nh, nw), k


def degrade(hr, seed: int, cfg: DegradationConfig | None = None, index: int = 0):
    """Degrade an H x W x 3 HR array; returns ``(lr, trace)`` with lr at H/final_scale."""
    cfg = cfg or DegradationConfig()
    hr = _as_float(hr)
    h, w = hr.shape[:2]
    mult = cfg.final_scale * 8
    if h % mult or w % mult:
        raise DegradationError(f"HR size {h}x{w} must be divisible by {mult}")
    trace = DegradationTrace(seed=seed, index=index, input_shape=(h, w))
    k = 1  # op 0 is reserved for crop/flip sampling
    ops, size, k = _sample_stage((h, w), 1, seed, index, k, cfg)
    trace.ops += ops
    rng = op_rng(seed, index, k)
    k += 1
    if rng.random() < cfg.second_order_prob:
        ops, size, k = _sample_stage(size, 2, seed, index, k, cfg)
        trace.ops += ops
    rng = op_rng(seed, index, k)
    target = (h // cfg.final_scale, w // cfg.final_scale)
    trace.ops.append({"op": "resize", "height": target[0], "width": target[1], "mode": _choose_mode(rng, cfg)})
    return replay(hr, trace), trace


def replay(hr, trace: DegradationTrace):
    img = _as_float(hr)
    if tuple(img.shape[:2]) != tuple(trace.input_shape):
        raise DegradationError(f"trace expects input {trace.input_shape}, got {img.shape[:2]}")
    for op in trace.ops:
        img = apply_op(img, op)
    return img


# ---- dataset synthesis -----------------------------------------------------


def sample_crop_params(seed, index, n_sources, source_shapes, crop, flip_prob):
    """Draw (source index, top, left, flip) for pair ``index``."""
    rng = op_rng(seed, index, 0)
    src = int(rng.integers(n_sources))
    h, w = source_shapes[src]
    if h < crop or w < crop:
        raise DegradationError(f"source image {src} ({h}x{w}) is smaller than the crop size {crop}")
    top = int(rng.integers(h - crop + 1))
    left = int(rng.integers(w - crop + 1))
    flip = bool(rng.random() < flip_prob)
    return src, top, left, flip


def synth_dataset(hr_dir, out_dir, n: int, seed: int, cfg: DegradationConfig | None = None) -> dict:
    """Write ``n`` HR/LR pairs with traces and a manifest under ``out_dir``.

    Layout: ``hr/{idx:06d}.png``, ``lr/{idx:06d}.png``, ``traces/{idx:06d}.json``
    and ``manifest.json``. The LR image is degraded from the 8-bit HR crop.
    """
    cfg = cfg or DegradationConfig()
    sources = list_images(hr_dir)
    if not sources:
        raise DegradationError(f"no images found in {hr_dir}")
    if n < 0:
        raise DegradationError("n must be non-negative")
    out = Path(out_dir)
    for sub in ("hr", "lr", "traces"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    arrays = [read_image(p) for p in sources]
    shapes = [a.shape[:2] for a in arrays]
    pairs = []
    for i in range(n):
        src, top, left, flip = sample_crop_params(seed, i, len(arrays), shapes, cfg.crop_size, cfg.flip_prob)
        crop = arrays[src][top:top + cfg.crop_size, left:left + cfg.crop_size]
        if flip:
            crop = crop[:, ::-1]
        hr = quantize(crop).astype(np.float32) / 255.0
        lr, trace = degrade(hr, seed, cfg, index=i)
        name = f"{i:06d}"
        write_image(out / "hr" / f"{name}.png", hr)
        write_image(out / "lr" / f"{name}.png", lr)
        (out / "traces" / f"{name}.json").write_text(json.dumps(trace.to_dict(), indent=1, sort_keys=True))
        pairs.append({
            "index": i, "hr": f"hr/{name}.png", "lr": f"lr/{name}.png", "trace": f"traces/{name}.json",
            "source": sources[src].name, "crop": [top, left], "flip": flip,
        })
    manifest = {
        "seed": seed,
        "n": n,
        "final_scale": cfg.final_scale,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "pairs": pairs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    log.info("wrote %d pairs to %s", n, out)
    return manifest
