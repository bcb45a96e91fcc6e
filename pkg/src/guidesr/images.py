"""Lossless image I/O. Arrays are float32 H x W x 3 in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def quantize(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(arr)).save(path, format="PNG", optimize=False, compress_level=6)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    """H x W x 3 array -> 1 x 3 x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None].contiguous()


def to_array(t: torch.Tensor) -> np.ndarray:
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError("expected a single image")
        t = t[0]
    return t.detach().cpu().float().permute(1, 2, 0).numpy()
