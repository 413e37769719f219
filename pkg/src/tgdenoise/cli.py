"""Command-line interface.

Subcommands wire the library into the full workflow: simulate phantom data,
build a target bank, train, denoise, evaluate picking, compute FSC curves,
and run the ablation sweep. Reports are CSV files with matplotlib figures
rendered alongside. Exit codes: 0 success, 1 usage error, 2 data/format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import plotting
from .denoiser import DenoiseConfig, denoise_micrograph
from .errors import DataError, NumericalError, ParameterError
from .evaluation import (
    fsc,
    match_particles,
    picking_metrics,
    read_coords,
    resolution_at,
)
from .mrc_io import Micrograph, Volume, read_mrc, write_mrc
from .noise_model import GaussianNoiseParams, PoissonGaussianParams, SpatialNoiseMap
from .phantom import GroundTruth, PhantomSpec, default_phantom_spec, make_micrograph, write_ground_truth
from .score_model import ScoreModelConfig, load_checkpoint
from .target_bank import build_bank, load_bank, save_bank
from .trainer import TrainingSchedule, train

CONFIG_ENV_VAR = "TGDENOISE_CONFIG"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(path) -> dict:
    """Flat key=value file mirroring the training schedule fields."""
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"config line without '=': {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    return values


def _schedule_from_config(values: dict, overrides: dict) -> TrainingSchedule:
    merged = dict(values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for f in fields(TrainingSchedule):
        if f.name not in merged:
            continue
        raw = merged[f.name]
        if isinstance(raw, str):
            if f.name in ("sigma_a_levels", "adam_betas"):
                kwargs[f.name] = tuple(float(v) for v in raw.split(","))
            elif f.name in ("epochs", "batch_size", "warmup_epochs", "ramp_end_epochs",
                            "patches_per_micrograph", "patch_size",
                            "encoder_refresh_epochs", "seed", "lr_decay_steps"):
                kwargs[f.name] = int(raw)
            elif f.name == "augment":
                kwargs[f.name] = PoissonGaussianParams() if raw.lower() in ("1", "true", "on") else None
            else:
                kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return TrainingSchedule(**kwargs)


def _spec_from_json(path) -> PhantomSpec:
    with open(path) as fh:
        raw = json.load(fh)
    noise_pg = raw.pop("poisson_gaussian", "default")
    noise_g = raw.pop("gaussian", None)
    blobs = raw.pop("volume_blobs", None)
    kwargs = dict(raw)
    if blobs is not None:
        kwargs["volume_blobs"] = [
            (tuple(center), float(std), float(amp)) for center, std, amp in blobs
        ]
        spec = PhantomSpec(**kwargs)
    else:
        spec = default_phantom_spec(**kwargs)
    if noise_pg is None:
        spec.poisson_gaussian = None
    elif noise_pg != "default":
        spec.poisson_gaussian = PoissonGaussianParams(**noise_pg)
    if noise_g is not None:
        spec.gaussian = GaussianNoiseParams(**noise_g)
    if isinstance(spec.canvas_size, list):
        spec.canvas_size = tuple(spec.canvas_size)
    return spec


def cmd_simulate(args) -> int:
    spec = _spec_from_json(args.spec) if args.spec else default_phantom_spec()
    os.makedirs(args.out, exist_ok=True)
    base_seed = spec.rotation_seed
    for i in range(args.n_micrographs):
        spec.rotation_seed = base_seed + i
        gt = make_micrograph(spec)
        stem = f"m{i:03d}" if args.n_micrographs > 1 else ""
        write_ground_truth(gt, args.out, stem=stem)
    spec.rotation_seed = base_seed
    snapshot = {
        "volume_blobs": spec.volume_blobs,
        "volume_size": spec.volume_size,
        "canvas_size": list(spec.canvas_size),
        "n_particles": spec.n_particles,
        "min_separation": spec.min_separation,
        "particle_size": spec.particle_size,
        "rotation_seed": spec.rotation_seed,
        "pixel_size_angstrom": spec.pixel_size_angstrom,
        "poisson_gaussian": None if spec.poisson_gaussian is None else vars(spec.poisson_gaussian),
        "gaussian": vars(spec.gaussian),
    }
    with open(os.path.join(args.out, "spec.json"), "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
    print(f"wrote {args.n_micrographs} micrograph(s) to {args.out}")
    return 0


def cmd_build_targets(args) -> int:
    vol = read_mrc(args.volume)
    if not isinstance(vol, Volume):
        raise DataError(f"{args.volume} is not a 3-D volume")
    bank = build_bank(vol, n_views=args.views, cutoff=args.cutoff, temperature=args.tau)
    save_bank(bank, args.out)
    print(f"bank with {bank.size} views, feature rank {bank.basis.shape[1]}, "
          f"sigma2 {bank.sigma2_surrogate:.4g} -> {args.out}")
    return 0


def _load_micrographs(data_dir) -> list[Micrograph]:
    paths = sorted(glob.glob(os.path.join(data_dir, "*.mrc")))
    paths = [p for p in paths if "clean" not in os.path.basename(p)]
    if not paths:
        raise DataError(f"no .mrc micrographs found in {data_dir}")
    out = []
    for p in paths:
        m = read_mrc(p)
        if isinstance(m, Micrograph):
            out.append(m)
    if not out:
        raise DataError(f"no 2-D micrographs among the .mrc files in {data_dir}")
    return out


def cmd_train(args) -> int:
    config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
    values = _load_config(config_path) if config_path else {}
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "seed": args.seed,
        "patch_size": args.patch_size, "patches_per_micrograph": args.patches_per_micrograph,
        "lr": args.lr,
    }
    sched = _schedule_from_config(values, overrides)
    data = _load_micrographs(args.data)
    bank = load_bank(args.bank) if args.bank else None
    model_config = ScoreModelConfig(patch_size=sched.patch_size) \
        if sched.patch_size <= 128 else ScoreModelConfig.paper_scale()
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "metrics.csv")
    if os.path.exists(log_path):
        os.unlink(log_path)
    result = train(
        data, bank, sched, config=model_config,
        dsm_only=args.dsm_only, no_anneal=args.no_anneal, fixed_wt=args.fixed_wt,
        out_dir=args.out, log_path=log_path,
    )
    plotting.save_training_curves(result.metrics, os.path.join(args.out, "training_curves.png"))
    if result.probe_trace:
        with open(os.path.join(args.out, "probe_trace.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "probe_confidence"])
            writer.writerows(enumerate(result.probe_trace))
    print(f"trained {sched.epochs} epochs; checkpoints: {result.checkpoints[-1]}")
    return 0


def cmd_denoise(args) -> int:
    if args.iters < 1:
        raise _UsageError(f"--iters must be >= 1, got {args.iters}")
    model, _ = load_checkpoint(args.checkpoint)
    m = read_mrc(args.input)
    if not isinstance(m, Micrograph):
        raise DataError(f"{args.input} is not a 2-D micrograph")
    cfg = DenoiseConfig(
        n_iterations=args.iters,
        noise_map=SpatialNoiseMap(a=args.noise_a, b=args.noise_b),
        tile_size=args.tile,
        overlap=args.overlap,
    )
    out = denoise_micrograph(model, m, cfg)
    out.provenance = f"denoised iters={args.iters} a={args.noise_a} b={args.noise_b}"
    write_mrc(out, args.output)
    print(f"denoised {args.input} -> {args.output}")
    return 0


def _pair_coord_files(pred, gt) -> list[tuple[str, str]]:
    if os.path.isdir(pred) != os.path.isdir(gt):
        raise DataError("pred and gt must both be files or both be directories")
    if os.path.isdir(pred):
        pred_files = sorted(glob.glob(os.path.join(pred, "*.txt")))
        gt_files = sorted(glob.glob(os.path.join(gt, "*.txt")))
        if len(pred_files) != len(gt_files) or not pred_files:
            raise DataError(
                f"coordinate file mismatch: {len(pred_files)} pred vs {len(gt_files)} gt"
            )
        return list(zip(pred_files, gt_files))
    return [(pred, gt)]


def cmd_evaluate(args) -> int:
    pairs = _pair_coord_files(args.pred, args.gt)
    outcomes = [
        match_particles(read_coords(p), read_coords(g), args.threshold)
        for p, g in pairs
    ]
    metrics = picking_metrics(outcomes)
    rows = [{
        "method": args.method,
        "micro_precision": metrics.micro_precision,
        "micro_recall": metrics.micro_recall,
        "micro_f1": metrics.micro_f1,
        "macro_precision_mean": metrics.macro_precision_mean,
        "macro_precision_std": metrics.macro_precision_std,
        "macro_recall_mean": metrics.macro_recall_mean,
        "macro_recall_std": metrics.macro_recall_std,
        "macro_f1_mean": metrics.macro_f1_mean,
        "macro_f1_std": metrics.macro_f1_std,
    }]
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    if args.plot:
        plotting.save_picking_plot(metrics, args.plot, title=args.method)
    print(f"micro P/R/F1: {metrics.micro_precision:.3f}/{metrics.micro_recall:.3f}/"
          f"{metrics.micro_f1:.3f}  macro F1: {metrics.macro_f1_mean:.3f}"
          f" +- {metrics.macro_f1_std:.3f}")
    return 0


def cmd_fsc(args) -> int:
    v1 = read_mrc(args.volume1)
    v2 = read_mrc(args.volume2)
    if not isinstance(v1, Volume) or not isinstance(v2, Volume):
        raise DataError("fsc expects two 3-D volumes")
    curve = fsc(v1, v2)
    res = resolution_at(curve, threshold=args.threshold)
    out_csv = args.out_csv or "fsc.csv"
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_per_angstrom", "fsc"])
        writer.writerows(zip(curve.shell_centers, curve.correlations))
    if args.plot:
        plotting.save_fsc_plot(curve, res, args.plot, threshold=args.threshold)
    flag = " (Nyquist limited)" if res.nyquist_limited else ""
    print(f"resolution at {args.threshold}: {res.angstrom:.3f} A{flag}; curve -> {out_csv}")
    return 0


SWEEP_VARIANTS = (
    ("dsm_only", {"dsm_only": True}),
    ("fixed_wt_0.05", {"fixed_wt": 0.05}),
    ("fixed_wt_0.10", {"fixed_wt": 0.10}),
    ("fixed_wt_0.15", {"fixed_wt": 0.15}),
    ("adaptive", {}),
    ("adaptive_no_anneal", {"no_anneal": True}),
)


def cmd_sweep(args) -> int:
    config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
    values = _load_config(config_path) if config_path else {}
    sched = _schedule_from_config(values, {"epochs": args.epochs, "seed": args.seed})
    data = _load_micrographs(args.data)
    bank = load_bank(args.bank)
    model_config = ScoreModelConfig(patch_size=sched.patch_size) \
        if sched.patch_size <= 128 else ScoreModelConfig.paper_scale()
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for name, kwargs in SWEEP_VARIANTS:
        result = train(data, bank, sched, config=model_config, **kwargs)
        last = result.metrics[-1]
        trace = np.asarray(result.probe_trace)
        rows.append({
            "variant": name,
            "final_loss": last["loss_total"],
            "final_dsm": last["loss_dsm"],
            "final_tsm": last["loss_tsm"],
            "mean_confidence": last["mean_confidence"],
            "probe_std": float(trace.std()) if trace.size else "",
        })
        print(f"{name}: loss {last['loss_total']:.4f}")
    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    plotting.save_sweep_plot(rows, os.path.join(args.out, "sweep.png"))
    print(f"sweep comparison -> {csv_path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tgdenoise", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate phantom micrographs with ground truth")
    p.add_argument("--spec", help="phantom spec JSON (defaults to the two-blob phantom)")
    p.add_argument("--out", required=True)
    p.add_argument("--n-micrographs", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-targets", help="build a projection target bank from a volume")
    p.add_argument("volume")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=64)
    p.add_argument("--cutoff", type=float, default=None, help="low-pass cutoff in 1/A")
    p.add_argument("--tau", type=float, default=0.1, help="softmax temperature")
    p.set_defaults(func=cmd_build_targets)

    p = sub.add_parser("train", help="train the score model")
    p.add_argument("data", help="directory of noisy .mrc micrographs")
    p.add_argument("--bank", help="target bank archive (omit with --dsm-only)")
    p.add_argument("--config", help=f"key=value config file (or ${CONFIG_ENV_VAR})")
    p.add_argument("--out", required=True)
    p.add_argument("--dsm-only", action="store_true")
    p.add_argument("--no-anneal", action="store_true")
    p.add_argument("--fixed-wt", type=float, default=None,
                   help="override the per-sample confidence with a constant")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--patches-per-micrograph", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise a micrograph with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--noise-a", type=float, default=0.5)
    p.add_argument("--noise-b", type=float, default=0.01)
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="picking metrics from coordinate files")
    p.add_argument("pred", help="predicted coordinates file or directory")
    p.add_argument("gt", help="ground-truth coordinates file or directory")
    p.add_argument("--threshold", type=float, default=32.0)
    p.add_argument("--method", default="pred")
    p.add_argument("--out-csv")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fsc", help="Fourier shell correlation between two volumes")
    p.add_argument("volume1")
    p.add_argument("volume2")
    p.add_argument("--threshold", type=float, default=0.143)
    p.add_argument("--out-csv")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_fsc)

    p = sub.add_parser("sweep", help="run the ablation grid and emit a comparison CSV")
    p.add_argument("data")
    p.add_argument("--bank", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ParameterError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
