"""Command-line interface.

Subcommands: synth, pretrain-ae, train-proto-dnn, train-proto-dm,
train-baseline, evaluate, individualize, cv. Common flags: --config <json>,
--seed <u64>, --out <dir>; flags override config-file values.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import experiments
from .dataio import (
    ANTHRO_NAMES,
    AnthropometricVector,
    fibonacci_sphere,
    frequency_grid,
    read_dataset,
    synth_generate,
    write_dataset,
)
from .pipeline import ExperimentConfig, hrir_export, individualize


def _common(parser):
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--out", help="override config output directory")


def _load_config(args) -> ExperimentConfig:
    config = (ExperimentConfig.from_json(args.config) if args.config
              else ExperimentConfig())
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "out", None):
        config.out_dir = args.out
    return config.validate()


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hrtfproto",
        description="HRTF individualization via source-position-independent prototypes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic .hds dataset")
    p.add_argument("--out", required=True, help="output .hds path")
    p.add_argument("--subjects", type=int, default=48)
    p.add_argument("--positions", type=int, default=64)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--distance", type=float, default=1.0)
    p.add_argument("--fmax", type=float, default=20000.0)
    p.add_argument("--dataset-id", default="synthetic")
    p.add_argument("--seed", type=int, default=0)

    for name in ("pretrain-ae", "train-proto-dnn", "train-proto-dm",
                 "train-baseline", "evaluate"):
        p = sub.add_parser(name)
        _common(p)

    p = sub.add_parser("cv", help="5-fold cross-validation of (lr, wd)")
    _common(p)
    p.add_argument("--folds", type=int, default=5)

    p = sub.add_parser("individualize",
                       help="anthropometry JSON to magnitudes (.hds) and optional HRIRs")
    _common(p)
    p.add_argument("--anthro", required=True,
                   help="JSON with left/right objects keyed by the 23 parameter names")
    p.add_argument("--grid-from", help=".hds file supplying the target grid")
    p.add_argument("--grid-positions", type=int, default=64)
    p.add_argument("--grid-distance", type=float, default=1.0)
    p.add_argument("--profile", help="magnitude normalizer profile (dataset id)")
    p.add_argument("--out-hds", required=True)
    p.add_argument("--hrir", help="optional raw float32 HRIR output path")
    p.add_argument("--subject-id", default="individualized")
    return parser


def _cmd_synth(args):
    positions = fibonacci_sphere(args.positions, args.distance)
    freqs = frequency_grid(args.bins, args.fmax)
    ds = synth_generate(args.seed, args.subjects, positions, freqs,
                        args.distance, f_max_hz=args.fmax,
                        dataset_id=args.dataset_id)
    write_dataset(ds, args.out)
    print(f"wrote {args.out}: S={ds.num_subjects} B={ds.num_positions} "
          f"L={ds.num_freq_bins}")
    return 0


def _cmd_individualize(args):
    config = _load_config(args)
    with open(args.anthro) as fh:
        spec = json.load(fh)
    missing = [k for k in ("left", "right") if k not in spec]
    if missing:
        raise SystemExit(f"anthropometry JSON missing ears: {missing}")
    alpha = {ear: AnthropometricVector.from_dict(spec[ear]).values
             for ear in ("left", "right")}

    estimator, ae, normalizers = experiments.build_predictor(config)
    if normalizers is None:
        raise SystemExit("individualize requires a prototype estimator "
                         "(proto_dnn or proto_dm)")
    if args.grid_from:
        grid_ds = read_dataset(args.grid_from)
        positions, freqs, r = (grid_ds.positions, grid_ds.frequencies_hz,
                               grid_ds.source_distance_m)
    else:
        positions = fibonacci_sphere(args.grid_positions, args.grid_distance)
        freqs = frequency_grid(config.num_freq_bins, config.f_max_hz)
        r = args.grid_distance

    mags = individualize(estimator, ae, normalizers, alpha["left"], alpha["right"],
                         positions, freqs, r, seed=config.seed,
                         magnitude_profile=args.profile)
    from .dataio import HrtfDataset, SubjectRecord

    out_ds = HrtfDataset(
        dataset_id="individualized", f_max_hz=config.f_max_hz,
        source_distance_m=r, frequencies_hz=freqs, positions=positions,
        subjects=[SubjectRecord(args.subject_id, mags.astype(np.float32),
                                AnthropometricVector(alpha["left"]),
                                AnthropometricVector(alpha["right"]))])
    write_dataset(out_ds, args.out_hds)
    print(f"wrote {args.out_hds}: B={out_ds.num_positions} L={out_ds.num_freq_bins}")
    if args.hrir:
        taps = hrir_export(mags, len(freqs))
        with open(args.hrir, "wb") as fh:
            fh.write(np.ascontiguousarray(taps, dtype="<f4").tobytes())
        print(f"wrote {args.hrir}: {taps.shape[0]} positions x 2 ears x "
              f"{taps.shape[2]} taps (zero ITD)")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        return _cmd_synth(args)
    if args.command == "individualize":
        return _cmd_individualize(args)
    config = _load_config(args)
    if args.command == "pretrain-ae":
        experiments.run_pretrain(config)
    elif args.command == "train-proto-dnn":
        experiments.run_train_proto_dnn(config)
    elif args.command == "train-proto-dm":
        experiments.run_train_proto_dm(config)
    elif args.command == "train-baseline":
        experiments.run_train_baseline(config)
    elif args.command == "evaluate":
        experiments.run_evaluate(config)
    elif args.command == "cv":
        experiments.run_cv(config, folds=args.folds)
    return 0


if __name__ == "__main__":
    sys.exit(main())
