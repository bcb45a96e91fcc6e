"""Checkpoint archive: a zip holding ``manifest.json`` and ``tensors.bin``.

``tensors.bin`` is the concatenation of little-endian float32 blobs in
manifest order. Archive entries carry a fixed timestamp so identical state
gives identical bytes.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import (
    ModelConfig, TrainConfig, config_to_dict, model_config_from_dict, train_config_from_dict,
)

FORMAT = "guidesr-checkpoint"
VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def to_checkpoint_name(name: str) -> str:
    """``a.b.lora.A`` -> ``lora.a.b.weight.A``; other names pass through."""
    for suffix in (".lora.A", ".lora.B"):
        if name.endswith(suffix):
            return f"lora.{name[: -len(suffix)]}.weight.{suffix[-1]}"
    return name


def from_checkpoint_name(name: str) -> str:
    if name.startswith("lora.") and name[-2:] in (".A", ".B") and name[:-2].endswith(".weight"):
        return f"{name[5:-9]}.lora.{name[-1]}"
    return name


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, torch.Tensor]
    frozen: dict[str, bool]
    iteration: int = 0
    optimizers: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _named_params(model, disc):
    named = [(to_checkpoint_name(n), p) for n, p in model.named_parameters()]
    if disc is not None:
        named += [(f"discriminator.{n}", p) for n, p in disc.named_parameters()]
    return named


def _optimizer_to_named(opt, name_of):
    sd = opt.state_dict()
    order = [name_of[id(p)] for g in opt.param_groups for p in g["params"]]
    groups = []
    for g in sd["param_groups"]:
        entry = {k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items() if k != "params"}
        entry["params"] = [order[i] for i in g["params"]]
        groups.append(entry)
    state = {}
    for idx, s in sd["state"].items():
        state[order[idx]] = {
            k: (v.detach().clone() if isinstance(v, torch.Tensor) and v.ndim > 0 else float(v))
            for k, v in s.items()
        }
    return {"param_groups": groups, "state": state}


def _optimizer_from_named(opt, named, name_of):
    order = [name_of[id(p)] for g in opt.param_groups for p in g["params"]]
    index = {n: i for i, n in enumerate(order)}
    if len(named["param_groups"]) != len(opt.param_groups):
        raise CheckpointError("optimizer param group count differs from checkpoint")
    groups = []
    for g in named["param_groups"]:
        try:
            ids = [index[n] for n in g["params"]]
        except KeyError as e:
            raise CheckpointError(f"optimizer parameter {e} not present in model") from None
        entry = {k: (tuple(v) if k == "betas" else v) for k, v in g.items()}
        entry["params"] = ids
        groups.append(entry)
    state = {}
    for n, s in named["state"].items():
        state[index[n]] = {
            k: (v.clone() if isinstance(v, torch.Tensor) else torch.tensor(v, dtype=torch.float32))
            for k, v in s.items()
        }
    opt.load_state_dict({"state": state, "param_groups": groups})


def capture(model, train_config, disc=None, optimizers=None, iteration=0, meta=None) -> Checkpoint:
    """Snapshot model (and optionally discriminator/optimizer) state."""
    named = _named_params(model, disc)
    name_of = {id(p): n for n, p in named}
    opts = {k: _optimizer_to_named(o, name_of) for k, o in (optimizers or {}).items()}
    return Checkpoint(
        model_config=model.cfg,
        train_config=train_config,
        params={n: p.detach().clone() for n, p in named},
        frozen={n: not p.requires_grad for n, p in named},
        iteration=iteration,
        optimizers=opts,
        meta=dict(meta or {}),
    )


def restore(ckpt: Checkpoint, model, disc=None, optimizers=None) -> None:
    named = _named_params(model, disc)
    names = {n for n, _ in named}
    missing = names - set(ckpt.params)
    unexpected = {n for n in set(ckpt.params) - names if disc is not None or not n.startswith("discriminator.")}
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
    with torch.no_grad():
        for n, p in named:
            src = ckpt.params[n]
            if src.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {n}: checkpoint {tuple(src.shape)}, model {tuple(p.shape)}")
            p.copy_(src)
            p.requires_grad_(not ckpt.frozen[n])
    name_of = {id(p): n for n, p in named}
    for key, opt in (optimizers or {}).items():
        if key in ckpt.optimizers:
            _optimizer_from_named(opt, ckpt.optimizers[key], name_of)


def model_from_checkpoint(ckpt: Checkpoint):
    from .lora import attach_lora
    from .model import build_model

    model = build_model(ckpt.model_config)
    if any(n.startswith("lora.") for n in ckpt.params):
        attach_lora(model, ckpt.model_config)
    restore(ckpt, model)
    return model


def _tensor_entries(ckpt):
    entries = [(n, t, {"frozen": ckpt.frozen[n]}) for n, t in ckpt.params.items()]
    for opt_key, opt in ckpt.optimizers.items():
        for pname, s in opt["state"].items():
            for k, v in s.items():
                if isinstance(v, torch.Tensor):
                    entries.append((f"optim.{opt_key}.{pname}.{k}", v, {}))
    return entries


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    blob = io.BytesIO()
    tensors = []
    offset = 0
    for name, t, extra in _tensor_entries(ckpt):
        arr = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4")
        blob.write(arr.tobytes())
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, **extra})
        offset += arr.size
    optim_meta = {}
    for key, opt in ckpt.optimizers.items():
        optim_meta[key] = {
            "param_groups": opt["param_groups"],
            "scalars": {
                pname: {k: v for k, v in s.items() if not isinstance(v, torch.Tensor)}
                for pname, s in opt["state"].items()
            },
        }
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": config_to_dict(ckpt.model_config),
        "train_config": config_to_dict(ckpt.train_config),
        "iteration": ckpt.iteration,
        "meta": ckpt.meta,
        "tensors": tensors,
        "optimizers": optim_meta,
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(zipfile.ZipInfo("manifest.json", _ZIP_DATE), json.dumps(manifest, indent=1, sort_keys=True))
            zf.writestr(zipfile.ZipInfo("tensors.bin", _ZIP_DATE), blob.getvalue())
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"could not write checkpoint {path}: {e}") from e


def load_checkpoint(path, expected_model_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            raw = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError) as e:
        raise CheckpointFormatError(f"corrupt or truncated checkpoint {path}: {e}") from e
    except OSError as e:
        raise CheckpointError(f"could not read checkpoint {path}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise CheckpointFormatError(f"{path} is not a {FORMAT} archive")
    if manifest.get("version") != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")

    model_cfg = model_config_from_dict(manifest["model_config"])
    if expected_model_config is not None and model_cfg != expected_model_config:
        raise ConfigMismatchError(f"{path}: model config differs from the expected one")
    data = np.frombuffer(raw, dtype="<f4")
    params, frozen, optim_tensors = {}, {}, {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + n > data.size:
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} runs past the end of the blob")
        t = torch.from_numpy(data[start:start + n].copy()).reshape(entry["shape"])
        if entry["name"].startswith("optim."):
            optim_tensors[entry["name"]] = t
        else:
            params[entry["name"]] = t
            frozen[entry["name"]] = bool(entry["frozen"])

    optimizers = {}
    for key, om in manifest["optimizers"].items():
        state = {}
        for pname, scalars in om["scalars"].items():
            s = dict(scalars)
            prefix = f"optim.{key}.{pname}."
            for tname, t in optim_tensors.items():
                if tname.startswith(prefix) and "." not in tname[len(prefix):]:
                    s[tname[len(prefix):]] = t
            state[pname] = s
        optimizers[key] = {"param_groups": om["param_groups"], "state": state}

    return Checkpoint(
        model_config=model_cfg,
        train_config=train_config_from_dict(manifest["train_config"]),
        params=params,
        frozen=frozen,
        iteration=int(manifest["iteration"]),
        optimizers=optimizers,
        meta=manifest["meta"],
    )
