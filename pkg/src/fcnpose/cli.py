"""Command-line orchestration for reproducible runs.

Subcommands wrap one library operation each; ``sweep`` chains the whole
compression pipeline (prune -> retrain -> post-training quantize) across a
list of rates. Every command writes its resolved configuration next to its
outputs, never mutates inputs, and refuses to overwrite existing output
paths. Failures exit non-zero with a categorized message
(config | data | numeric | io).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import compressor, dataset_synth, metrics_eval, network, trainer
from .errors import ContractViolation, FcnPoseError

EXIT_CODES = {"config": 2, "data": 3, "numeric": 4, "io": 5}


def _fail(category: str, message: str) -> int:
    print(f"error [{category}]: {message}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


def _fresh_path(path: Path) -> Path:
    if path.exists():
        raise FileExistsError(f"output path {path} already exists")
    return path


def _fresh_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise FileExistsError(f"output directory {path} is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_config(out_dir: Path, command: str, resolved: dict):
    resolved = {"command": command, **resolved}
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _log(msg: str):
    print(msg, flush=True)


def _parse_rates(text: str):
    rates = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        value = float(part)
        rates.append(value / 100.0 if value >= 1.0 else value)
    return rates


def _train_config(args, max_epochs=None) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        max_epochs=args.epochs if max_epochs is None else max_epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        patience=args.patience,
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_dataset(args) -> int:
    if args.action == "gen":
        if not args.out:
            raise ContractViolation("dataset gen needs --out")
        out = _fresh_dir(Path(args.out))
        config = dataset_synth.ArmConfig.default(
            args.resolution, args.resolution, occluders=args.occluders)
        train, val = dataset_synth.build_dataset(
            config, args.n_base, args.val_fraction, args.augment_per_image,
            args.seed)
        dataset_synth.save_dataset(out, train, val, config)
        _write_run_config(out, "dataset gen", {
            "seed": args.seed, "n_base": args.n_base,
            "val_fraction": args.val_fraction,
            "augment_per_image": args.augment_per_image,
            "resolution": args.resolution, "occluders": args.occluders,
        })
        _log(f"wrote {len(train)} train / {len(val)} val samples to {out}")
    else:  # inspect
        if not args.data:
            raise ContractViolation("dataset inspect needs --data")
        train, val, config = dataset_synth.load_dataset(args.data)
        visible = sum(int(s.keypoints.visible.sum()) for s in train + val)
        total = 8 * (len(train) + len(val))
        _log(f"dataset {args.data}")
        _log(f"  resolution    {config.width}x{config.height}")
        _log(f"  train samples {len(train)}")
        _log(f"  val samples   {len(val)}")
        _log(f"  mask radii    disk {config.radius_px:.2f}px / "
             f"stroke {config.stroke_px:.2f}px")
        _log(f"  visible kps   {visible}/{total}")
    return 0


def cmd_train(args) -> int:
    train_set, val_set, _ = dataset_synth.load_dataset(args.data)
    out = _fresh_dir(Path(args.out))
    config = _train_config(args)
    spec, weights = network.build_fcn_pose(args.seed)
    _log(f"training for up to {config.max_epochs} epochs "
         f"on {len(train_set)} samples")
    weights, history = trainer.train(spec, weights, train_set, val_set, config)
    network.save_model(spec, weights, out / "model.fcnp")
    with open(out / "history.csv", "w") as fh:
        fh.write(history.to_csv())
    _write_run_config(out, "train", {
        "data": args.data, "seed": args.seed, **asdict(config)})
    _log(f"stopped after {history.epochs_run} epochs ({history.stop_reason}); "
         f"best val loss {history.val_loss[history.best_epoch]:.6f} "
         f"at epoch {history.best_epoch}")
    return 0


def cmd_prune(args) -> int:
    spec, weights = network.load_model(args.model)
    out = _fresh_path(Path(args.out))
    plan = compressor.plan_prune(weights, args.rate)
    new_spec, new_weights = compressor.apply_prune(spec, weights, plan)
    network.save_model(new_spec, new_weights, out)
    if args.plan:
        plan.save(_fresh_path(Path(args.plan)))
    _log(f"pruned at rate {args.rate:.2f}: "
         f"{network.count_params(spec)} -> {network.count_params(new_spec)} "
         f"parameters")
    return 0


def cmd_quantize(args) -> int:
    spec, weights = network.load_model(args.model)
    out = _fresh_path(Path(args.out))
    if weights.dtype == network.FP16:
        _log("warning: model is already FP16; copying unchanged")
        network.save_model(spec, weights, out)
        return 0
    quantized = compressor.quantize_model(spec, weights)
    network.save_model(spec, quantized, out)
    _log(f"quantized {network.count_params(spec)} parameters to FP16")
    return 0


def cmd_eval(args) -> int:
    spec, weights = network.load_model(args.model)
    train_set, val_set, _ = dataset_synth.load_dataset(args.data)
    samples = val_set if args.split == "val" else train_set
    pck_cfg = metrics_eval.PckConfig(alpha=args.alpha)
    mean, std, _ = metrics_eval.evaluate_pck(
        spec, weights, samples, pck_cfg, args.threshold, args.distance_m)
    _log(f"PCK@{args.alpha:g} over {len(samples)} {args.split} samples: "
         f"{mean:.4f} (std {std:.4f})")
    return 0


def cmd_bench(args) -> int:
    spec, weights = network.load_model(args.model)
    _, val_set, _ = dataset_synth.load_dataset(args.data)
    images = [s.image for s in val_set[:max(1, args.images)]]
    stats = metrics_eval.benchmark_inference(
        spec, weights, images, args.warmup, args.reps,
        args.threshold, args.distance_m)
    _log(f"inference  {stats.mean * 1e3:.3f} ms/image "
         f"(std {stats.std * 1e3:.3f} ms) over {args.reps} reps")
    _log(f"postproc   {stats.post_mean * 1e3:.3f} ms/image")
    _log(f"fps        {stats.fps:.2f} inference-only, "
         f"{stats.fps_total:.2f} with post-processing")
    return 0


def cmd_sweep(args) -> int:
    train_set, val_set, _ = dataset_synth.load_dataset(args.data)
    out = _fresh_dir(Path(args.out))
    rates = _parse_rates(args.rates)
    config = metrics_eval.SweepConfig(
        train=_train_config(args),
        retrain=_train_config(args, max_epochs=args.retrain_epochs),
        pck=metrics_eval.PckConfig(alpha=args.alpha),
        threshold=args.threshold,
        m=args.distance_m,
        warmup=args.warmup,
        reps=args.reps,
        quantize=not args.no_quantize,
        seed=args.seed,
    )
    _write_run_config(out, "sweep", {
        "data": args.data, "rates": rates, "seed": args.seed,
        "alpha": args.alpha, "threshold": args.threshold,
        "distance_m": args.distance_m, "warmup": args.warmup,
        "reps": args.reps, "quantize": not args.no_quantize,
        "train": asdict(config.train), "retrain": asdict(config.retrain),
    })
    report = metrics_eval.sweep(train_set, val_set, rates, config, out,
                                log=_log)
    for row in report.rows:
        _log(f"rate {row.rate:.2f}  pck {row.pck_mean:.3f}  "
             f"fps {row.fps_infer:.2f}  params {row.params}")
    _log(f"report written to {out / 'sweep.csv'} and {out / 'sweep.svg'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common_eval_flags(p):
    p.add_argument("--alpha", type=float, default=0.5,
                   help="PCK distance threshold fraction")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="activation binarization threshold")
    p.add_argument("--distance-m", type=float, default=1.0,
                   help="clustering distance M")


def _add_train_flags(p, default_epochs=200):
    p.add_argument("--epochs", type=int, default=default_epochs)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcnpose",
        description="Keypoint detection with pruning/quantization compression",
    )
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file of defaults, mirrored by flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate or inspect a dataset")
    p.add_argument("action", choices=["gen", "inspect"])
    p.add_argument("--out", type=str, help="output directory (gen)")
    p.add_argument("--data", type=str, help="dataset directory (inspect)")
    p.add_argument("--n-base", type=int, default=500)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--augment-per-image", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--occluders", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the full model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="prune a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plan", type=str, default=None,
                   help="also write the pruning plan JSON here")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("quantize", help="post-training FP16 quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="PCK of a model over a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    _add_common_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="single-threaded latency benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--images", type=int, default=4)
    _add_common_eval_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="full prune/retrain/quantize sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rates", type=str, default="30,50,70,90",
                   help="comma list, percent or fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--retrain-epochs", type=int, default=100)
    p.add_argument("--no-quantize", action="store_true",
                   help="skip the final FP16 quantization step")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--reps", type=int, default=50)
    _add_train_flags(p)
    _add_common_eval_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _apply_config_file(parser, argv):
    """Seed parser defaults from --config JSON; flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=str, default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config:
        with open(known.config) as fh:
            defaults = json.load(fh)
        for sp in parser._subparsers._group_actions[0].choices.values():
            sp.set_defaults(**{k.replace("-", "_"): v
                               for k, v in defaults.items()})
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        parser = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except FcnPoseError as exc:
        return _fail(exc.category, str(exc))
    except FileExistsError as exc:
        return _fail("io", str(exc))
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("io", str(exc))
    except (json.JSONDecodeError, KeyError) as exc:
        return _fail("data", f"malformed input file: {exc}")
    except (ValueError, OverflowError) as exc:
        return _fail("numeric", str(exc))


if __name__ == "__main__":
    sys.exit(main())
