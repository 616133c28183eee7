#!/usr/bin/env python3
"""End-to-end comparison on synthetic data: baselines vs prototype estimators.

Generates a spherical-head dataset, pretrains the conditioned autoencoder,
trains the prototype DNN, the prototype DM, and the direct-grid baseline, and
prints a per-method LSD table on the held-out subjects. Runs on CPU; the
default scale finishes in roughly ten minutes.
"""

import argparse
import time

from hrtfproto.autoencoder import (
    AutoencoderConfig,
    ConditionedAutoencoder,
    PretrainConfig,
    compute_prototype,
    pretrain_autoencoder,
)
from hrtfproto.dataio import fibonacci_sphere, frequency_grid, merge_datasets, synth_generate
from hrtfproto.diffusion import (
    DdimSchedule,
    DiffusionTrainConfig,
    PrototypeUnet,
    UnetConfig,
    train_diffusion,
)
from hrtfproto.estimators import (
    EstimatorTrainConfig,
    HrtfDnn,
    HrtfDnnConfig,
    PrototypeDnn,
    ProtoDnnConfig,
    train_estimator,
)
from hrtfproto.experiments import build_targets
from hrtfproto.numerics.optim import LrSchedule
from hrtfproto.pipeline import (
    ExperimentConfig,
    HrtfDnnPredictor,
    MeanMagnitudePredictor,
    OraclePrototypeEstimator,
    ProtoDmEstimator,
    ProtoDnnEstimator,
    evaluate,
)


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--subjects", type=int, default=48)
    p.add_argument("--test-subjects", type=int, default=8)
    p.add_argument("--positions", type=int, default=48)
    p.add_argument("--bins", type=int, default=48)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--ae-epochs", type=int, default=40)
    p.add_argument("--estimator-epochs", type=int, default=300)
    p.add_argument("--dm-epochs", type=int, default=300)
    p.add_argument("--dm-t-infer", type=int, default=100)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--skip-dm", action="store_true")
    p.add_argument("--skip-baseline", action="store_true")
    return p.parse_args()


def main():
    args = parse_args()
    t0 = time.time()
    pos = fibonacci_sphere(args.positions, 1.0)
    freqs = frequency_grid(args.bins)
    full = synth_generate(args.seed, args.subjects, pos, freqs, 1.0,
                          dataset_id="synthetic")
    ids = full.subject_ids()
    split = args.subjects - args.test_subjects
    train, test = full.subset(ids[:split]), full.subset(ids[split:])
    merged = merge_datasets([train])
    print(f"dataset: {split} train / {args.test_subjects} test subjects, "
          f"B={args.positions}, L={args.bins}")

    ae = ConditionedAutoencoder(AutoencoderConfig(
        latent_dim=args.latent_dim, hidden=32, gen_hidden=64, ffm_frequencies=8),
        seed=args.seed)
    pre = pretrain_autoencoder(ae, merged, PretrainConfig(
        learning_rate=1e-3, weight_decay=1e-4, max_epochs=args.ae_epochs,
        early_stop_patience=12, val_fraction=0.1, seed=args.seed, log_every=5))
    print(f"[{time.time() - t0:5.0f}s] autoencoder pretrained "
          f"({len(pre.history)} epochs)")

    targets, normalizers = build_targets(ExperimentConfig(), merged,
                                         pre.prototypes, pre.magnitude_stats)
    results = {}

    protos = dict(pre.prototypes)
    for s in test.subjects:
        protos[(test.dataset_id, s.subject_id)] = compute_prototype(
            ae, pre.magnitude_stats[test.dataset_id], s, pos, freqs, 1.0)
    results["autoencoder reconstruction"] = evaluate(
        OraclePrototypeEstimator(protos, normalizers.prototype), ae, test, normalizers)
    results["population mean"] = evaluate(MeanMagnitudePredictor(merged), None, test)

    dnn = PrototypeDnn(ProtoDnnConfig(latent_dim=args.latent_dim), seed=args.seed)
    train_estimator(dnn, merged, targets, "mse_prototype", EstimatorTrainConfig(
        learning_rate=1e-3, weight_decay=1e-4, max_epochs=args.estimator_epochs,
        early_stop_patience=40, val_fraction=0.1, seed=args.seed))
    results["prototype DNN"] = evaluate(ProtoDnnEstimator(dnn), ae, test,
                                        normalizers, seed=args.seed)
    print(f"[{time.time() - t0:5.0f}s] prototype DNN trained")

    if not args.skip_baseline:
        base = HrtfDnn(HrtfDnnConfig(num_positions=args.positions,
                                     num_freq_bins=args.bins), seed=args.seed)
        train_estimator(base, merged, targets, "lsd_magnitude", EstimatorTrainConfig(
            learning_rate=1e-3, weight_decay=1e-4, max_epochs=args.estimator_epochs,
            early_stop_patience=40, batch_size=16, val_fraction=0.1, seed=args.seed))
        results["direct-grid DNN"] = evaluate(
            HrtfDnnPredictor(base, targets.anthro_stats, targets.magnitude_stats),
            None, test)
        print(f"[{time.time() - t0:5.0f}s] direct-grid baseline trained")

    if not args.skip_dm:
        unet = PrototypeUnet(UnetConfig(
            latent_dim=args.latent_dim, channels=(16, 24, 32),
            num_tokens=args.bins, heads=4, anthro_emb_dim=8, cond_emb_dim=32,
            ffm_frequencies=4), seed=args.seed)
        schedule = DdimSchedule(t_infer=args.dm_t_infer)
        train_diffusion(unet, schedule, merged, targets, DiffusionTrainConfig(
            learning_rate=1e-3, weight_decay=1e-4, max_epochs=args.dm_epochs,
            schedule=LrSchedule("cosine", total_epochs=args.dm_epochs, min_lr=1e-5),
            batch_size=8, val_fraction=0.1, seed=args.seed))
        results["prototype DM"] = evaluate(ProtoDmEstimator(unet, schedule), ae,
                                           test, normalizers, seed=args.seed)
        print(f"[{time.time() - t0:5.0f}s] prototype DM trained")

    width = max(len(k) for k in results)
    print(f"\n{'method'.ljust(width)}  LSD mean +- std (dB)   params")
    for name, rep in results.items():
        print(f"{name.ljust(width)}  {rep.mean_lsd_db:6.3f} +- {rep.std_lsd_db:5.3f}"
              f"      {rep.param_count:,}")
    print(f"\ntotal {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
