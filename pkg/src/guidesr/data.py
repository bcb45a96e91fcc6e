from __future__ import annotations

import json
from pathlib import Path

import torch

from .images import read_image, to_tensor
from .model import upsample


class DatasetError(RuntimeError):
    pass


class PairDataset:
    """In-memory HR/LR pairs from a ``synth_dataset`` directory.

    Model inputs are the LR images bicubic-upsampled to HR resolution.
    """

    def __init__(self, root, indices=None):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self.scale = int(self.manifest["final_scale"])
        pairs = self.manifest["pairs"]
        if indices is not None:
            pairs = [pairs[i] for i in indices]
        self.pairs = pairs
        self._hr, self._lr, self._inp = [], [], []
        for p in pairs:
            hr_path, lr_path = self.root / p["hr"], self.root / p["lr"]
            if not hr_path.exists() or not lr_path.exists():
                raise DatasetError(f"missing pair files for index {p['index']} under {self.root}")
            hr, lr = to_tensor(read_image(hr_path)), to_tensor(read_image(lr_path))
            if hr.shape[-2] != lr.shape[-2] * self.scale or hr.shape[-1] != lr.shape[-1] * self.scale:
                raise DatasetError(f"pair {p['index']}: HR {tuple(hr.shape[-2:])} is not x{self.scale} of LR")
            self._hr.append(hr)
            self._lr.append(lr)
            self._inp.append(upsample(lr, self.scale))

    @property
    def dataset_id(self) -> str:
        return f"{self.root.name}-seed{self.manifest['seed']}-{self.manifest['config_hash']}"

    def __len__(self):
        return len(self.pairs)

    def hr(self, i) -> torch.Tensor:
        return self._hr[i]

    def lr(self, i) -> torch.Tensor:
        return self._lr[i]

    def model_input(self, i) -> torch.Tensor:
        return self._inp[i]

    def subset(self, indices) -> "PairDataset":
        sub = object.__new__(PairDataset)
        sub.root, sub.manifest, sub.scale = self.root, self.manifest, self.scale
        sub.pairs = [self.pairs[i] for i in indices]
        sub._hr = [self._hr[i] for i in indices]
        sub._lr = [self._lr[i] for i in indices]
        sub._inp = [self._inp[i] for i in indices]
        return sub

    def split(self, holdout: int) -> tuple["PairDataset", "PairDataset | None"]:
        """Last ``holdout`` pairs form the holdout set (none if the dataset is too small)."""
        n = len(self)
        if holdout <= 0 or holdout >= n:
            return self, None
        return self.subset(range(n - holdout)), self.subset(range(n - holdout, n))
