"""Command line entry point: ``greenseg <subcommand> ...``.

Every RunConfig field is also a flag named ``--<section>.<key>`` (for
example ``--training.max_epochs 30``).  Values are applied in order:
preset, ``--config`` file, ``--set section.key=value``, explicit flags.
Results go to stdout as JSON; failures print one JSON object to stderr
and exit nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import PRESETS, ConfigError, RunConfig, load_config, set_value

log = logging.getLogger("greenseg")


class CliError(RuntimeError):
    pass


def _config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI-style run configuration file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    g = p.add_argument_group("configuration fields")
    for sec in dataclasses.fields(RunConfig):
        sample = getattr(RunConfig(), sec.name)
        for f in dataclasses.fields(sample):
            g.add_argument(f"--{sec.name}.{f.name}", dest=f"cfg__{sec.name}__{f.name}", default=None,
                           metavar=_metavar(f, getattr(sample, f.name)))


def _metavar(f, value) -> str:
    if value is None:  # optional field: name the declared type, not NoneType
        return str(f.type).split("|")[0].strip().upper()
    return type(value).__name__.upper()


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset) if args.config else PRESETS[args.preset]()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        set_value(cfg, k.strip(), v)
    for k, v in vars(args).items():
        if k.startswith("cfg__") and v is not None:
            _, sec, key = k.split("__", 2)
            set_value(cfg, f"{sec}.{key}", v)
    return cfg.validate()


def _emit(obj):
    print(json.dumps(obj, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o)))


# -- subcommands -----------------------------------------------------------

def cmd_train(args):
    from .training import train

    cfg = _build_config(args)
    rl = train(cfg, log_path=args.log)
    _emit(rl.summary)


def _data_splits(cfg):
    from .data.preprocess import split_by_patient
    from .training import load_slices

    return split_by_patient(load_slices(cfg), seed=cfg.data.split_seed)


def cmd_evaluate(args):
    from .training import evaluate

    cfg = _build_config(args)
    model, meta = checkpoint.load_model(args.checkpoint)
    _, val, test = _data_splits(cfg)
    pairs = {"test": test, "val": val}[args.split]
    res = evaluate(model, pairs, cfg.training.loss, cfg.training.eval_batch_size)
    _emit({"checkpoint": args.checkpoint, "split": args.split, **res})


def cmd_lr_find(args):
    from .data.loader import LoaderConfig, make_loader
    from .models import build_model
    from .training import _optimizer_factory, lr_find

    cfg = _build_config(args)
    train_set, _, _ = _data_splits(cfg)
    model = build_model(cfg.model, seed=cfg.training.seed)
    loader = make_loader(train_set, LoaderConfig(batch_size=cfg.loader.batch_size,
                                                 shuffle_seed=cfg.loader.shuffle_seed))
    sw = lr_find(model, loader, args.steps or cfg.training.lr_find_max_steps, loss=cfg.training.loss,
                 optimizer=_optimizer_factory(cfg, cfg.optimizer.lr), return_sweep=True)
    _emit({"suggested_lr": sw.suggestion, "steps": len(sw.losses), "lrs": sw.lrs, "losses": sw.losses})


def cmd_prune(args):
    from .compression import build_dependency_graph, prune_channels
    from .models import param_count
    from .training import Finetuner

    cfg = _build_config(args)
    model, meta = checkpoint.load_model(args.checkpoint)
    train_set, val, test = _data_splits(cfg)
    ft = Finetuner(train_set, test, cfg.training.loss, cfg.optimizer.lr, cfg.loader.batch_size,
                   cfg.training.seed)
    before = {"params": param_count(model), "dice": ft.evaluate(model)}
    groups = build_dependency_graph(model)
    pruned = prune_channels(model, groups, args.ratio)
    after = {"params": param_count(pruned), "dice": ft.evaluate(pruned)}
    out = {"groups": len(groups), "ratio": args.ratio, "before": before, "pruned": after}
    if args.finetune_epochs:
        pruned = ft.finetune(pruned, args.finetune_epochs)
        out["finetuned"] = {"epochs": args.finetune_epochs, "dice": ft.evaluate(pruned)}
    checkpoint.save_model(args.out, pruned, extra_meta={"pruned_from": str(args.checkpoint), "ratio": args.ratio})
    out["out"] = args.out
    _emit(out)


def cmd_quantize(args):
    from .compression import dequantized_forward, quantize_weights_int8
    from .data.types import stack_batch

    model, meta = checkpoint.load_model(args.checkpoint)
    q = quantize_weights_int8(model)
    size = q.save(args.out)
    fp32 = Path(args.checkpoint).stat().st_size
    out = {"out": args.out, "bytes": size, "fp32_bytes": fp32, "ratio": size / fp32}
    if args.drift_samples:
        cfg = _build_config(args)
        _, _, test = _data_splits(cfg)
        images, _ = stack_batch(test[:args.drift_samples])
        out["mean_abs_drift"] = float(np.mean(np.abs(dequantized_forward(q, images) - model.predict(images))))
    _emit(out)


def cmd_synth_data(args):
    from .data.nifti import write_nifti
    from .data.phantoms import generate_phantoms

    pairs = generate_phantoms(args.n, args.side, seed=args.seed)
    out = {"slices": len(pairs)}
    if args.out:
        out["bytes"] = checkpoint.save_dataset(args.out, pairs)
        out["out"] = args.out
    if args.nifti_dir:
        d = Path(args.nifti_dir)
        d.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(args.seed)
        by_patient = {}
        for p in pairs:
            by_patient.setdefault(p.patient_id, []).append(p)
        for pid, ps in by_patient.items():
            vol = np.stack([p.image for p in ps], axis=-1)
            frames = [vol + rng.normal(0, 0.01, vol.shape) for _ in range(args.frames)]
            raw = (np.clip(np.stack(frames, axis=-1), 0, 1) * 1000).astype(np.int16)
            mask = np.stack([p.mask for p in ps], axis=-1).astype(np.uint8)
            write_nifti(d / f"{pid}_raw.nii.gz", raw, slope=0.001)
            write_nifti(d / f"{pid}_mask.nii.gz", mask)
        out["nifti_dir"] = str(d)
        out["patients"] = len(by_patient)
    if not args.out and not args.nifti_dir:
        raise CliError("synth-data needs --out and/or --nifti-dir")
    _emit(out)


def cmd_preprocess(args):
    from .data.preprocess import clean_pairs, load_directory, write_manifest

    if not args.input and not args.manifest:
        raise CliError("preprocess needs --input DIR or --manifest CSV")
    slices, pairs = load_directory(args.input, manifest=args.manifest, time_policy=args.time_policy,
                                   drop_empty=args.drop_empty)
    if args.manifest_out:
        write_manifest(args.manifest_out, pairs)
    size = checkpoint.save_dataset(args.out, slices)
    skipped = clean_pairs(args.input).skipped if args.input else []
    _emit({"pairs": len(pairs), "slices": len(slices), "skipped": skipped, "out": args.out, "bytes": size})


def cmd_report(args):
    from .report import emit_report

    paths = []
    for p in args.logs:
        p = Path(p)
        paths.extend(sorted(p.glob("*.jsonl")) if p.is_dir() else [p])
    files = emit_report(paths, args.out)
    _emit({"csv": str(files.csv), "figures": {k: str(v) for k, v in files.figures.items()},
           "skipped": files.skipped})


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greenseg", description="Energy-aware segmentation training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="run the full training protocol")
    _config_flags(s)
    s.add_argument("--log", help="JSONL run log path (default: <output.dir>/<run>.jsonl)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate a checkpoint on the test (or validation) split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=["test", "val"], default="test")
    _config_flags(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("lr-find", help="learning-rate range test")
    s.add_argument("--steps", type=int, default=None)
    _config_flags(s)
    s.set_defaults(func=cmd_lr_find)

    s = sub.add_parser("prune", help="structured channel pruning of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--finetune-epochs", type=int, default=0)
    s.add_argument("--out", required=True)
    _config_flags(s)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("quantize", help="int8 weight quantization of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--drift-samples", type=int, default=0, help="test slices used to measure output drift")
    _config_flags(s)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("synth-data", help="generate synthetic head phantoms")
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="dataset container (.gseg)")
    s.add_argument("--nifti-dir", help="also write per-patient 4D raw / 3D mask NIfTI pairs here")
    s.add_argument("--frames", type=int, default=2)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("preprocess", help="NIfTI pairs -> 2D slice dataset")
    s.add_argument("--input", help="directory of <stem>_raw/_mask.nii[.gz] files")
    s.add_argument("--manifest", help="CSV of raw_path,mask_path,patient_id")
    s.add_argument("--out", required=True)
    s.add_argument("--manifest-out")
    s.add_argument("--time-policy", choices=["all", "first"], default="all")
    s.add_argument("--drop-empty", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("report", help="summary CSV and SVG charts from run logs")
    s.add_argument("logs", nargs="+", help="JSONL run logs or directories containing them")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print(json.dumps({"command": args.command, "error": "Interrupted", "message": "interrupted"}),
              file=sys.stderr)
        return 130
    except Exception as exc:  # report every failure as one structured line
        print(json.dumps({"command": args.command, "error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
