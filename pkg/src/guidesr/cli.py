"""Command-line entry points: ``guidesr {synth,train,infer,eval,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .checkpoint import load_checkpoint, model_from_checkpoint
from .config import VARIANTS, RunConfig, config_hash, config_to_dict
from .data import PairDataset
from .degradation import DegradationConfig, synth_dataset
from .images import read_image, to_array, to_tensor, write_image
from .losses import PerceptualNet
from .metrics import MetricReport, aggregate_table, evaluate, export_radar, rows_to_csv, score_pairs
from .model import pad_to_multiple, upsample
from .train import fit

log = logging.getLogger("guidesr")


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("GUIDESR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"GUIDESR_SEED must be an integer, got {env!r}") from None


def _write_run_manifest(out: Path, command: str, seed: int, cfg_hash: str, artifacts: dict, extra=None):
    manifest = {
        "command": command,
        "config_hash": cfg_hash,
        "seed": seed,
        "started": extra.pop("started") if extra and "started" in extra else None,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": artifacts,
        "version": __version__,
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def cmd_synth(args) -> int:
    run = RunConfig.load(args.config)
    cfg = DegradationConfig.from_dict(run.degradation)
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    manifest = synth_dataset(args.hr_dir, args.out, args.n, _seed(args), cfg)
    path = Path(args.out) / "manifest.json"
    print(path)
    log.info("synthesised %d pairs (config %s)", manifest["n"], manifest["config_hash"])
    return 0


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    seed = _seed(args)
    model_cfg = run.model.replace(variant=args.ablation)
    train_cfg = run.train.replace(total_iters=args.iters, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    dataset = PairDataset(args.data)

    def progress(report):
        if (report.iteration + 1) % 50 == 0:
            log.info("iter %d total %.5f", report.iteration + 1, report.total)

    ckpt = fit(dataset, model_cfg, train_cfg, run_dir=out, progress=progress)
    artifacts = {"losses": "losses.log", "last": "ckpt/last.ckpt", "eval": "eval/"}
    if (out / "ckpt" / "best.ckpt").exists():
        artifacts["best"] = "ckpt/best.ckpt"
    (out / "config.json").write_text(json.dumps(
        {"model": config_to_dict(model_cfg), "train": config_to_dict(train_cfg)}, indent=1, sort_keys=True))
    _write_run_manifest(out, "train", seed, config_hash(model_cfg, train_cfg), artifacts,
                        {"started": started, "data": str(args.data), "ablation": args.ablation})
    print(out / "ckpt" / "last.ckpt")
    history = ckpt.meta.get("holdout_psnr_history") or []
    if history:
        print(f"holdout psnr {history[-1][1]:.4f} dB")
    return 0


@torch.no_grad()
def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt).eval()
    scale = args.scale if args.scale is not None else ckpt.model_config.upscale_factor
    lr = to_tensor(read_image(args.input))
    inp = upsample(lr, scale)
    padded, (h, w) = pad_to_multiple(inp, model.cfg.spatial_multiple)
    if padded.shape[-2:] != inp.shape[-2:]:
        log.warning("input %dx%d padded to %dx%d for the model, output is cropped back",
                    h, w, *padded.shape[-2:])
    r1, r2 = model(padded)
    write_image(args.output, to_array(r1[..., :h, :w]))
    print(args.output)
    if args.emit_guidance:
        if r2 is None:
            raise UsageError(f"checkpoint variant {model.cfg.variant!r} has no guidance branch")
        out = Path(args.output)
        guide = out.with_name(f"{out.stem}_guidance{out.suffix or '.png'}")
        write_image(guide, to_array(r2[..., :h, :w]))
        print(guide)
    return 0


def cmd_eval(args) -> int:
    dataset = PairDataset(args.data)
    out = Path(args.out)
    phi = PerceptualNet()
    if args.sanity:
        report = score_pairs([dataset.hr(i) for i in range(len(dataset))],
                             [dataset.hr(i) for i in range(len(dataset))],
                             phi, dataset.dataset_id, "hr-vs-hr", range(len(dataset)))
        report.iteration = 0
    else:
        if args.ckpt is None:
            raise UsageError("--ckpt is required unless --sanity is given")
        ckpt = load_checkpoint(args.ckpt)
        model = model_from_checkpoint(ckpt)
        report = evaluate(model, dataset, phi, model_id=args.model_id or f"{ckpt.model_config.variant}")
        report.iteration = ckpt.iteration
    path = out / f"report_{report.iteration}.json"
    report.save(path)
    agg = report.aggregate
    print(" ".join(f"{k}={agg[k]:.6f}" for k in sorted(agg)) + f" n={len(report.per_image)} -> {path}")
    return 0


def cmd_report(args) -> int:
    reports = [MetricReport.load(p) for p in args.reports]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "radar.csv").write_text(rows_to_csv(export_radar(reports)))
    (out / "aggregate.csv").write_text(rows_to_csv(aggregate_table(reports)))
    print(out / "radar.csv")
    print(out / "aggregate.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guidesr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesise degraded LR/HR pairs")
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a synthesised dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--ablation", choices=VARIANTS, default="full")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="super-resolve one LR image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--scale", type=int)
    i.add_argument("--emit-guidance", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--sanity", action="store_true", help="score HR against itself")
    e.add_argument("--model-id")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="radar and aggregate tables from metric reports")
    r.add_argument("--reports", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except Exception as e:  # noqa: BLE001 - top-level reporting
        print(f"guidesr {args.command}: error: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
