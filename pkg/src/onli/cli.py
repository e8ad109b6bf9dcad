"""Command-line entry point wiring the full pipeline.

Subcommands: generate, train, infer, eval, xval. Runs are driven by a flat
``key = value`` config file; every run echoes its resolved configuration to
the output directory so it can be reproduced byte-identically under fixed
seeds and a fixed thread count (ONLI_THREADS).

Exit codes: 0 success, 2 config/validation error, 3 numerical failure,
4 partial completion.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
import traceback

import numpy as np
import torch

from . import metrics, physics, preprocess, train as train_mod
from .fields import Grid3, RealVolume, read_field, write_field
from .neuralop import (ModelConfig, load_checkpoint, model_forward)
from .preprocess import CurlInput

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4


class ConfigError(ValueError):
    pass


# key -> (type, default); None default means required when used
KNOWN_KEYS = {
    "out_dir": (str, None),
    "seed": (int, 0),
    # dataset generation
    "n_subjects": (int, None),
    "grid_nx": (int, 32),
    "grid_ny": (int, 32),
    "grid_nz": (int, 32),
    "voxel_size_m": (float, 0.0015),
    "frequencies": (str, "30,50,70"),
    "noise_std": (float, 0.0),
    "sponge_strength": (float, 3.0),
    "solver_tolerance": (float, 1e-8),
    # training data
    "dataset": (str, None),
    # model
    "layers": (int, 5),
    "modes": (int, 20),
    "width": (int, 23),
    "spade_hidden": (int, 32),
    "spade_classes": (int, 6),
    "activation": (str, "gelu"),
    # training loop
    "epochs": (int, 50),
    "batch_size": (int, 1),
    "lr0": (float, 1e-3),
    "lr_min": (float, 0.0),
    "weight_decay": (float, 1e-4),
    "folds": (int, 10),
}


def parse_config(path):
    """Flat key=value config; '#' starts a comment; unknown keys rejected."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = key.strip(), val.strip()
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            typ, _ = KNOWN_KEYS[key]
            try:
                values[key] = typ(val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return values


def resolve(values, required):
    out = {}
    for key, (typ, default) in KNOWN_KEYS.items():
        if key in values:
            out[key] = values[key]
        elif default is not None:
            out[key] = default
        elif key in required:
            raise ConfigError(f"missing required key {key!r}")
    return out


def write_resolved(cfg, out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"resolved_{name}.cfg")
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")
    return path


def _frequencies(cfg):
    freqs = [float(f) for f in cfg["frequencies"].split(",") if f.strip()]
    if not freqs or any(f <= 0 for f in freqs):
        raise ConfigError(f"bad frequencies list: {cfg['frequencies']!r}")
    return freqs


def _model_config(cfg, spade):
    return ModelConfig(
        layers=cfg["layers"], modes=cfg["modes"], width=cfg["width"],
        spade=spade, spade_hidden=cfg["spade_hidden"],
        spade_classes=cfg["spade_classes"], activation=cfg["activation"])


def _train_config(cfg, seed):
    return train_mod.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=cfg["lr0"],
        lr_min=cfg["lr_min"], weight_decay=cfg["weight_decay"], seed=seed)


def cmd_generate(args):
    cfg = resolve(parse_config(args.config), {"out_dir", "n_subjects"})
    seed = args.seed if args.seed is not None else cfg["seed"]
    cfg["seed"] = seed
    if cfg["n_subjects"] < 1:
        raise ConfigError("n_subjects must be positive")
    grid = Grid3(cfg["grid_nx"], cfg["grid_ny"], cfg["grid_nz"],
                 cfg["voxel_size_m"], cfg["voxel_size_m"], cfg["voxel_size_m"])
    write_resolved(cfg, cfg["out_dir"], "generate")
    manifest = physics.make_dataset(
        cfg["n_subjects"], cfg["out_dir"], grid,
        frequencies=_frequencies(cfg), seed=seed,
        noise_std=cfg["noise_std"], sponge_strength=cfg["sponge_strength"],
        tolerance=cfg["solver_tolerance"])
    print(f"manifest: {manifest}")
    print(f"digest: {physics.manifest_digest(manifest)}")
    return EXIT_OK


def _load_fold_samples(cfg):
    rows = physics.load_manifest(cfg["dataset"])
    samples = train_mod.load_samples(rows)
    subjects = sorted({s.subject_id for s in samples})
    return samples, subjects


def cmd_train(args):
    cfg = resolve(parse_config(args.config), {"out_dir", "dataset"})
    seed = args.seed if args.seed is not None else cfg["seed"]
    cfg["seed"] = seed
    samples, subjects = _load_fold_samples(cfg)
    if args.spade and any(s.mask is None for s in samples):
        raise ConfigError("--spade requires masks in the manifest")
    folds = train_mod.kfold_split(subjects, k=cfg["folds"], seed=seed)
    if not (0 <= args.fold < len(folds)):
        raise ConfigError(f"fold {args.fold} out of range 0..{len(folds) - 1}")
    write_resolved(cfg, cfg["out_dir"], "train")
    result = train_mod.train_loop(
        samples, folds[args.fold], _model_config(cfg, args.spade),
        _train_config(cfg, seed), out_dir=cfg["out_dir"])
    preprocess.save_normalizer(
        os.path.join(cfg["out_dir"], f"fold{args.fold}_normalizer.txt"),
        result.stats)
    for row in result.history:
        print(f"epoch {row['epoch']}: train {row['train_loss']:.6g} "
              f"val {row['val_loss']:.6g} lr {row['lr']:.6g}")
    print(f"best epoch {result.best_epoch} val {result.best_val_loss:.6g}")
    print(f"best checkpoint: {result.best_checkpoint_path}")
    return EXIT_OK


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    vol = read_field(args.input)
    if not isinstance(vol, RealVolume) or vol.channels != 7:
        raise ConfigError("input must be a 7-channel curl-input field file")
    f_hz = float(vol.data[6].flat[0]) * 100.0
    mask = read_field(args.mask) if args.mask else None
    stats = preprocess.load_normalizer(args.stats) if args.stats else None
    x = CurlInput(vol, f_hz)
    if stats is not None:
        x = CurlInput(preprocess.normalize(vol, stats, "input"), f_hz)
    t0 = time.perf_counter()
    pred = model_forward(model, x, mask)
    elapsed = time.perf_counter() - t0
    if stats is not None:
        pred = preprocess.denormalize(pred, stats, "target")
    write_field(args.output, pred)
    print(f"wrote {args.output}")
    print(f"inference wall-clock: {elapsed:.3f} s")
    return EXIT_OK


def _predict_records(result, samples, fold):
    records = []
    for s in samples:
        if s.subject_id not in set(fold.val_subjects):
            continue
        x = CurlInput(preprocess.normalize(s.curl.volume, result.stats,
                                           "input"), s.frequency_hz)
        pred = model_forward(result.model, x,
                             s.mask if result.model.config.spade else None)
        pred = preprocess.denormalize(pred, result.stats, "target")
        records.append(metrics.PredictionRecord(
            s.subject_id, s.frequency_hz, pred, s.target, s.mask))
    return records


def _direct_baseline(rows, fold):
    """Direct-inversion predictions for the fold's validation subjects."""
    records = []
    losses = []
    val = set(fold.val_subjects)
    for row in rows:
        if row["missing"] or row["subject_id"] not in val:
            continue
        u = read_field(row["displacement_path"])
        target = read_field(row["target_path"])
        mask = read_field(row["mask_path"])
        omega = 2 * np.pi * row["frequency_hz"]
        est, valid = physics.direct_inversion(u, physics.DEFAULT_DENSITY, omega)
        pred = RealVolume(u.grid, np.stack([est.data[0].real, est.data[0].imag]))
        records.append(metrics.PredictionRecord(
            row["subject_id"], row["frequency_hz"], pred, target, mask))
        losses.append(train_mod.relative_l2_loss(pred.data[None],
                                                 target.data[None]))
    return records, float(np.mean(losses))


def cmd_xval(args):
    cfg = resolve(parse_config(args.config), {"out_dir", "dataset"})
    seed = args.seed if args.seed is not None else cfg["seed"]
    cfg["seed"] = seed
    samples, subjects = _load_fold_samples(cfg)
    rows = physics.load_manifest(cfg["dataset"])
    if args.spade and any(s.mask is None for s in samples):
        raise ConfigError("--spade requires masks in the manifest")
    folds = train_mod.kfold_split(subjects, k=cfg["folds"], seed=seed)
    write_resolved(cfg, cfg["out_dir"], "xval")

    model_name = "spade-onli" if args.spade else "onli"
    fold_results = {model_name: []}
    if args.baseline == "direct":
        fold_results["direct"] = []
    failed = []
    for fold in folds:
        fold_dir = os.path.join(cfg["out_dir"], f"fold{fold.index}")
        try:
            best = os.path.join(fold_dir, f"fold{fold.index}_best.ckpt")
            stats_path = os.path.join(fold_dir,
                                      f"fold{fold.index}_normalizer.txt")
            if args.resume and os.path.exists(best) and os.path.exists(stats_path):
                model = load_checkpoint(best)
                stats = preprocess.load_normalizer(stats_path)
                log = os.path.join(fold_dir, f"fold{fold.index}_loss.csv")
                with open(log) as fh:
                    last = fh.readlines()[-1].split(",")
                result = train_mod.TrainResult(
                    model=model, history=[], stats=stats, best_epoch=-1,
                    best_val_loss=float(last[2]))
            else:
                result = train_mod.train_loop(
                    samples, fold, _model_config(cfg, args.spade),
                    _train_config(cfg, seed), out_dir=fold_dir)
                preprocess.save_normalizer(stats_path, result.stats)
            records = _predict_records(result, samples, fold)
            fold_results[model_name].append(metrics.FoldResult(
                fold.index, result.best_val_loss, records))
            if args.baseline == "direct":
                recs, loss = _direct_baseline(rows, fold)
                fold_results["direct"].append(
                    metrics.FoldResult(fold.index, loss, recs))
            print(f"fold {fold.index}: val {result.best_val_loss:.6g}")
        except (train_mod.DivergenceError, physics.SolverError) as exc:
            failed.append((fold.index, str(exc)))
            print(f"fold {fold.index} FAILED: {exc}", file=sys.stderr)

    if failed:
        print(f"{len(failed)} fold(s) failed; completed folds preserved in "
              f"{cfg['out_dir']}", file=sys.stderr)
        return EXIT_PARTIAL
    metrics.pool_and_report(fold_results, cfg["out_dir"],
                            expected_folds=len(folds))
    print(f"pooled report written to {cfg['out_dir']}")
    return EXIT_OK


def cmd_eval(args):
    """Evaluate one checkpoint over every sample in the manifest."""
    cfg = resolve(parse_config(args.config), {"out_dir", "dataset"})
    model = load_checkpoint(args.checkpoint)
    stats = preprocess.load_normalizer(args.stats)
    samples, subjects = _load_fold_samples(cfg)
    write_resolved(cfg, cfg["out_dir"], "eval")
    records = []
    for s in samples:
        x = CurlInput(preprocess.normalize(s.curl.volume, stats, "input"),
                      s.frequency_hz)
        pred = model_forward(model, x, s.mask if model.config.spade else None)
        pred = preprocess.denormalize(pred, stats, "target")
        records.append(metrics.PredictionRecord(
            s.subject_id, s.frequency_hz, pred, s.target, s.mask))
    rows, pooled = metrics.evaluate_predictions(records)
    with open(os.path.join(cfg["out_dir"], "eval_metrics.csv"), "w") as fh:
        fh.write("model,fold,subject,frequency,region,modulus,r,ape,ssim\n")
        for row in rows:
            fh.write(f"model,0,{row.subject_id},{row.frequency_hz:g},"
                     f"{row.region},{row.modulus},{row.r:.6g},{row.ape:.6g},"
                     f"{row.ssim:.6g}\n")
    for (region, modulus), r in sorted(pooled.items()):
        print(f"{region}/{modulus}: pooled r = {r:.4f}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="onli",
        description="Synthetic MRE operator-learning pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", required=extra.get("config", True))
        sp.add_argument("--seed", type=int, default=None)
        return sp

    add("generate", cmd_generate)

    sp = add("train", cmd_train)
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--spade", action="store_true")

    sp = sub.add_parser("infer")
    sp.set_defaults(fn=cmd_infer)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--mask", default=None)
    sp.add_argument("--stats", default=None)

    sp = add("eval", cmd_eval)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stats", required=True)

    sp = add("xval", cmd_xval)
    sp.add_argument("--spade", action="store_true")
    sp.add_argument("--baseline", choices=["direct"], default=None)
    sp.add_argument("--resume", action="store_true")
    return p


def main(argv=None):
    threads = os.environ.get("ONLI_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
        torch.set_num_interop_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (physics.SolverError, train_mod.DivergenceError,
            train_mod.PoisonedGradientError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        traceback.print_exc()
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
