"""Command line interface: one verb per pipeline stage plus a full run.

Path verbs (synth-data, train-ae, train-denoiser, fit-decoders, reconstruct,
evaluate) operate on explicit dataset/model/output paths so stages can be
mixed and matched; ``run`` chains all of them inside one run directory, and
``k-sweep`` / ``export-weights`` post-process such a directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .errors import MindloopError, StageError
from .pipeline import (
    RunPaths,
    evaluate_stage,
    export_roi_weights,
    fit_decoders_stage,
    k_sweep,
    reconstruct_stage,
    run_experiment,
    synth_data,
    train_ae_stage,
    train_denoiser_stage,
)

log = logging.getLogger("mindloop.cli")

# argparse dest -> config attribute, shared by every verb that takes overrides
_OVERRIDES = {
    "seed": "seed",
    "ridge_lambda": "ridge_lambda",
    "voxels_per_target": "voxels_per_target",
    "k_percent": "k_percent",
    "diffusion_steps": "diffusion_steps",
    "sample_steps": "sample_steps",
    "align_lr": "align_lr",
    "align_steps": "align_steps",
    "mode": "mode",
    "ablate": "ablate",
    "roi": "roi",
}

_DATA_OVERRIDES = ("n_train", "n_test", "image_size", "noise_level",
                   "max_trials", "n_lvc", "n_hvc")


def _add_config_flags(parser: argparse.ArgumentParser, data_flags=False) -> None:
    parser.add_argument("--config", default=None,
                        help="JSON config file; flags override its fields")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--lambda", dest="ridge_lambda", type=float, default=None,
                        help="ridge penalty")
    parser.add_argument("--voxels-per-target", type=int, default=None)
    parser.add_argument("--k-percent", type=float, default=None)
    parser.add_argument("--T", dest="diffusion_steps", type=int, default=None,
                        help="diffusion schedule length")
    parser.add_argument("--sample-steps", type=int, default=None,
                        help="reverse sampling steps")
    parser.add_argument("--align-lr", type=float, default=None)
    parser.add_argument("--align-steps", type=int, default=None)
    parser.add_argument("--mode", choices=("decoded", "upper-bound"), default=None)
    parser.add_argument("--ablate", choices=("none", "c", "z", "zclip"), default=None)
    parser.add_argument("--roi", choices=("all", "lvc", "hvc"), default=None)
    if data_flags:
        for flag in _DATA_OVERRIDES:
            kind = float if flag == "noise_level" else int
            parser.add_argument(f"--{flag.replace('_', '-')}", type=kind, default=None)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mindloop",
        description="two-stage brain-to-image reconstruction on synthetic data",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="execute every stage in order")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--resume", action="store_true",
                   help="skip stages whose outputs are already current")
    _add_config_flags(p, data_flags=True)

    p = sub.add_parser("synth-data", help="generate the dataset")
    p.add_argument("--out", required=True, help="dataset directory to write")
    _add_config_flags(p, data_flags=True)

    p = sub.add_parser("train-ae", help="train the latent autoencoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint file to write")
    _add_config_flags(p)

    p = sub.add_parser("train-denoiser", help="train the diffusion denoiser")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ae", required=True, help="autoencoder checkpoint")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    _add_config_flags(p)

    p = sub.add_parser("fit-decoders", help="fit voxel-to-feature ridge decoders")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True,
                   help="model directory; decoders land in OUT/decoders")
    p.add_argument("--ae", default=None,
                   help="autoencoder checkpoint (default OUT/autoencoder.ckpt)")
    _add_config_flags(p)

    p = sub.add_parser("reconstruct", help="run two-stage reconstruction")
    p.add_argument("--dataset", required=True)
    p.add_argument("--models", required=True,
                   help="directory with autoencoder.ckpt, denoiser.ckpt, decoders/")
    p.add_argument("--out", required=True, help="reconstruction directory to write")
    p.add_argument("--limit", type=int, default=None,
                   help="reconstruct only the first N test items")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score reconstructions and write the report")
    p.add_argument("--recon", required=True, help="reconstruction directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="report JSON file to write")
    _add_config_flags(p)

    p = sub.add_parser("k-sweep", help="feature-retention sweep on a finished run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--ks", default="5,10,25,50,100",
                   help="comma-separated retention percentages")
    p.add_argument("--out", help="CSV output path (default <run>/sweep.csv)")
    _add_config_flags(p)

    p = sub.add_parser("export-weights", help="per-voxel decoder weight magnitudes")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--out", help="CSV output path (default <run>/roi_weights.csv)")
    _add_config_flags(p)

    return parser


def _config_for(args: argparse.Namespace) -> ExperimentConfig:
    """Assemble the effective config: file/run-dir base plus flag overrides."""
    run_config = None
    if getattr(args, "run", None):
        run_config = RunPaths(args.run).config
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    elif run_config is not None and run_config.exists():
        cfg = ExperimentConfig.from_json(run_config.read_text())
    else:
        cfg = ExperimentConfig()
    for dest, attr in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            setattr(cfg, attr, value)
    for dest in _DATA_OVERRIDES:
        value = getattr(args, dest, None)
        if value is not None:
            setattr(cfg.data, dest, value)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_for(args)
        if args.verb == "run":
            print(run_experiment(cfg, args.run, resume=args.resume))
        elif args.verb == "synth-data":
            print(synth_data(cfg, args.out))
        elif args.verb == "train-ae":
            print(train_ae_stage(cfg, args.dataset, args.out))
        elif args.verb == "train-denoiser":
            print(train_denoiser_stage(cfg, args.dataset, args.ae, args.out))
        elif args.verb == "fit-decoders":
            print(fit_decoders_stage(cfg, args.dataset, args.out, ae_file=args.ae))
        elif args.verb == "reconstruct":
            print(reconstruct_stage(cfg, args.dataset, args.models, args.out,
                                    limit=args.limit))
        elif args.verb == "evaluate":
            print(evaluate_stage(cfg, args.recon, args.dataset, args.out))
        elif args.verb == "k-sweep":
            ks = [float(k) for k in args.ks.split(",") if k.strip()]
            out = args.out or str(Path(args.run) / "sweep.csv")
            for row in k_sweep(cfg, args.run, ks, out_path=out):
                log.info("k=%5.1f%%  kept %5d  acc %.4f  %-8s %.4f",
                         row["k_percent"], row["n_retained"],
                         row["decoding_accuracy"], row["metric"], row["value"])
            print(out)
        elif args.verb == "export-weights":
            out = args.out or str(Path(args.run) / "roi_weights.csv")
            rows = export_roi_weights(cfg, args.run, out_path=out)
            for name in ("caption", "latent", "features"):
                for roi in ("lvc", "hvc"):
                    vals = [r[name] for r in rows if r["roi"] == roi]
                    log.info("%-8s %-4s mean |w| %.5f", name, roi,
                             sum(vals) / len(vals))
            print(out)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except MindloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
