"""Config-driven workflows shared by the CLI, the scripts, and the tests."""

from __future__ import annotations

import json
import os

from . import dataio
from .autoencoder import (
    AutoencoderConfig,
    ConditionedAutoencoder,
    PretrainConfig,
    fit_prototype_normalizer,
    pretrain_autoencoder,
    read_prototypes,
    write_prototypes,
)
from .dataio import HrtfDataset, merge_datasets, read_dataset, split_subjects
from .diffusion import (
    DdimSchedule,
    DiffusionTrainConfig,
    PrototypeUnet,
    UnetConfig,
    train_diffusion,
)
from .estimators import (
    EstimatorTargets,
    EstimatorTrainConfig,
    HrtfDnn,
    HrtfDnnConfig,
    PrototypeDnn,
    ProtoDnnConfig,
    train_estimator,
)
from .numerics.engine import ContractViolation
from .numerics.optim import LrSchedule
from .pipeline import (
    ExperimentConfig,
    HrtfDnnPredictor,
    NormalizerSet,
    ProtoDmEstimator,
    ProtoDnnEstimator,
    cross_validate,
    evaluate,
)

AE_CKPT = "autoencoder.ckpt"
PROTO_ARCHIVE = "prototypes.hpz"
ESTIMATOR_CKPT = {"proto_dnn": "proto_dnn.ckpt", "proto_dm": "proto_dm.ckpt",
                  "hrtf_dnn": "hrtf_dnn.ckpt"}


def _path(config, name):
    return os.path.join(config.out_dir, name)


def load_config_datasets(config: ExperimentConfig) -> dict[str, HrtfDataset]:
    datasets = {}
    for path in config.dataset_paths:
        ds = read_dataset(path)
        if ds.dataset_id in datasets:
            raise ContractViolation(f"duplicate dataset id {ds.dataset_id!r}")
        datasets[ds.dataset_id] = ds
    return datasets


def split_for_config(config: ExperimentConfig, datasets=None):
    """Per-dataset splits merged into pretraining/estimator/test collections."""
    datasets = datasets or load_config_datasets(config)
    pretrain_parts, train_parts, test_parts = [], [], []
    for ds_id, ds in datasets.items():
        train_ids = config.train_ids.get(ds_id, [])
        test_ids = config.test_ids.get(ds_id, [])
        ae_only = config.ae_only_ids.get(ds_id, [])
        split = split_subjects(ds, train_ids, test_ids, ae_only)
        if split.train.num_subjects:
            train_parts.append(split.train)
        pretrain_subjects = split.train.subjects + split.ae_only.subjects
        if pretrain_subjects:
            pretrain_parts.append(
                HrtfDataset(ds.dataset_id, ds.f_max_hz, ds.source_distance_m,
                            ds.frequencies_hz, ds.positions, pretrain_subjects))
        if split.test.num_subjects:
            test_parts.append(split.test)
    return {
        "pretrain": merge_datasets(pretrain_parts),
        "train": merge_datasets(train_parts),
        "test": test_parts,
    }


def run_pretrain(config: ExperimentConfig, ae_config: AutoencoderConfig = None,
                 pre_config: PretrainConfig = None, log=print):
    """Pretrain the autoencoder and persist checkpoint plus prototype archive."""
    os.makedirs(config.out_dir, exist_ok=True)
    splits = split_for_config(config)
    merged = splits["pretrain"]
    ae_config = ae_config or AutoencoderConfig(
        latent_dim=config.latent_dim, f_max_hz=config.f_max_hz)
    pre_config = pre_config or PretrainConfig(
        learning_rate=config.learning_rate, weight_decay=config.weight_decay,
        max_epochs=config.max_epochs, seed=config.seed)
    ae = ConditionedAutoencoder(ae_config, seed=config.seed)
    result = pretrain_autoencoder(ae, merged, pre_config)
    ae.save(_path(config, AE_CKPT), magnitude_stats=result.magnitude_stats)
    write_prototypes(_path(config, PROTO_ARCHIVE), result.prototypes,
                     merged.num_freq_bins, ae.latent_dim)
    with open(_path(config, "pretrain_history.json"), "w") as fh:
        json.dump(result.history, fh, indent=2)
    if log:
        last = result.history[-1]
        log(f"pretrained {len(result.history)} epochs; "
            f"train {last['train_lsd']:.3f} dB, val {last['val_lsd']:.3f} dB")
    return result


def load_pretrained(config: ExperimentConfig):
    ae, mag_stats = ConditionedAutoencoder.load(_path(config, AE_CKPT))
    ae.eval()
    ae.freeze()
    prototypes, _, _ = read_prototypes(_path(config, PROTO_ARCHIVE))
    return ae, mag_stats, prototypes


def build_targets(config: ExperimentConfig, train_merged, prototypes,
                  magnitude_stats) -> tuple[EstimatorTargets, NormalizerSet]:
    """Fit anthro/prototype normalizers on the training split only."""
    anthro_stats = dataio.fit_anthro_normalizer(train_merged)
    train_protos = {
        (ds.dataset_id, s.subject_id): prototypes[(ds.dataset_id, s.subject_id)]
        for ds, s in train_merged.pairs() if s.has_anthropometry
    }
    proto_stats = fit_prototype_normalizer(train_protos)
    targets = EstimatorTargets(
        anthro_stats=anthro_stats,
        prototypes=prototypes,
        prototype_stats=proto_stats,
        magnitude_stats=magnitude_stats,
    )
    normalizers = NormalizerSet(anthro=anthro_stats, prototype=proto_stats,
                                magnitude=magnitude_stats)
    return targets, normalizers


def estimator_train_config(config: ExperimentConfig, lr=None, wd=None,
                           **overrides) -> EstimatorTrainConfig:
    return EstimatorTrainConfig(
        learning_rate=config.learning_rate if lr is None else lr,
        weight_decay=config.weight_decay if wd is None else wd,
        max_epochs=config.max_epochs,
        schedule=LrSchedule(config.schedule_kind, total_epochs=config.max_epochs),
        seed=config.seed,
        **overrides,
    )


def run_train_proto_dnn(config: ExperimentConfig, net: PrototypeDnn = None,
                        train_config: EstimatorTrainConfig = None, log=print):
    splits = split_for_config(config)
    ae, mag_stats, prototypes = load_pretrained(config)
    targets, normalizers = build_targets(config, splits["train"], prototypes, mag_stats)
    net = net or PrototypeDnn(ProtoDnnConfig(
        latent_dim=ae.latent_dim, f_max_hz=config.f_max_hz), seed=config.seed)
    result = train_estimator(net, splits["train"], targets, "mse_prototype",
                             train_config or estimator_train_config(config))
    net.save(_path(config, ESTIMATOR_CKPT["proto_dnn"]),
             anthro_stats=targets.anthro_stats, proto_stats=targets.prototype_stats)
    if log:
        log(f"proto-dnn trained {len(result.history)} epochs; "
            f"best val MSE {result.best_val:.5f}")
    return result, targets, normalizers


def run_train_proto_dm(config: ExperimentConfig, net: PrototypeUnet = None,
                       schedule: DdimSchedule = None,
                       train_config: DiffusionTrainConfig = None, log=print):
    splits = split_for_config(config)
    ae, mag_stats, prototypes = load_pretrained(config)
    targets, normalizers = build_targets(config, splits["train"], prototypes, mag_stats)
    schedule = schedule or DdimSchedule(
        t_infer=config.sampler_t_infer, eta=config.sampler_eta,
        guidance=config.sampler_w)
    net = net or PrototypeUnet(UnetConfig(
        latent_dim=ae.latent_dim, num_tokens=splits["train"].num_freq_bins,
        f_max_hz=config.f_max_hz), seed=config.seed)
    train_config = train_config or DiffusionTrainConfig(
        learning_rate=config.learning_rate, weight_decay=config.weight_decay,
        max_epochs=config.max_epochs,
        schedule=LrSchedule("cosine", total_epochs=config.max_epochs),
        seed=config.seed)
    result = train_diffusion(net, schedule, splits["train"], targets, train_config)
    net.save(_path(config, ESTIMATOR_CKPT["proto_dm"]), schedule=schedule,
             anthro_stats=targets.anthro_stats, proto_stats=targets.prototype_stats)
    if log:
        log(f"proto-dm trained {len(result.history)} epochs; "
            f"best val loss {result.best_val:.4f}")
    return result, targets, normalizers


def run_train_baseline(config: ExperimentConfig, net: HrtfDnn = None,
                       train_config: EstimatorTrainConfig = None, log=print):
    splits = split_for_config(config)
    train_merged = splits["train"]
    anthro_stats = dataio.fit_anthro_normalizer(train_merged)
    mag_stats = dataio.fit_magnitude_normalizers(splits["pretrain"])
    targets = EstimatorTargets(anthro_stats=anthro_stats, magnitude_stats=mag_stats)
    ds0 = train_merged.datasets[0]
    net = net or HrtfDnn(HrtfDnnConfig(
        num_positions=ds0.num_positions, num_freq_bins=ds0.num_freq_bins,
        dataset_id=ds0.dataset_id), seed=config.seed)
    result = train_estimator(net, train_merged, targets, "lsd_magnitude",
                             train_config or estimator_train_config(config))
    net.save(_path(config, ESTIMATOR_CKPT["hrtf_dnn"]), anthro_stats=anthro_stats,
             magnitude_stats=mag_stats[ds0.dataset_id])
    if log:
        log(f"baseline trained {len(result.history)} epochs; "
            f"best val LSD {result.best_val:.3f} dB")
    return result, targets


def build_predictor(config: ExperimentConfig):
    """Load the configured estimator's artifacts into an evaluation-ready object."""
    ae, mag_stats, _ = load_pretrained(config)
    if config.estimator == "proto_dnn":
        net, stats = PrototypeDnn.load(_path(config, ESTIMATOR_CKPT["proto_dnn"]))
        net.eval()
        estimator = ProtoDnnEstimator(net)
    elif config.estimator == "proto_dm":
        net, schedule, stats = PrototypeUnet.load(_path(config, ESTIMATOR_CKPT["proto_dm"]))
        net.eval()
        estimator = ProtoDmEstimator(net, schedule)
    else:
        net, stats = HrtfDnn.load(_path(config, ESTIMATOR_CKPT["hrtf_dnn"]))
        net.eval()
        return HrtfDnnPredictor(net, stats["anthro"],
                                {net.config.dataset_id: stats["magnitude"]}), ae, None
    normalizers = NormalizerSet(anthro=stats["anthro"], prototype=stats["prototype"],
                                magnitude=mag_stats)
    return estimator, ae, normalizers


def run_evaluate(config: ExperimentConfig, log=print):
    splits = split_for_config(config)
    predictor, ae, normalizers = build_predictor(config)
    test = merge_datasets(splits["test"])
    if normalizers is None:
        report = evaluate(predictor, None, test, seed=config.seed)
    else:
        report = evaluate(predictor, ae, test, normalizers, seed=config.seed)
    report.write_csv(_path(config, "report.csv"), _path(config, "summary.csv"))
    if log:
        log(f"mean LSD {report.mean_lsd_db:.3f} +- {report.std_lsd_db:.3f} dB "
            f"over {len(report.per_subject)} subjects "
            f"({report.param_count} parameters)")
    return report


def run_cv(config: ExperimentConfig, folds=5, log=print):
    """Subject-level cross-validation of (lr, wd) for the configured estimator."""
    splits = split_for_config(config)
    ae, mag_stats, prototypes = load_pretrained(config)
    datasets = {ds.dataset_id: ds for ds in splits["train"].datasets}

    def subset_merged(ids):
        parts = []
        for ds_id, ds in datasets.items():
            keep = [i for i in ids if i in set(ds.subject_ids())]
            if keep:
                parts.append(ds.subset(keep))
        return merge_datasets(parts)

    def trainer(train_ids, val_ids, lr, wd):
        train_merged = subset_merged(train_ids)
        val_merged = subset_merged(val_ids)
        targets, normalizers = build_targets(config, train_merged, prototypes, mag_stats)
        tc = estimator_train_config(config, lr=lr, wd=wd, val_fraction=0.0)
        if config.estimator == "proto_dm":
            net = PrototypeUnet(UnetConfig(
                latent_dim=ae.latent_dim, num_tokens=train_merged.num_freq_bins,
                f_max_hz=config.f_max_hz), seed=config.seed)
            schedule = DdimSchedule(t_infer=config.sampler_t_infer,
                                    eta=config.sampler_eta, guidance=config.sampler_w)
            dc = DiffusionTrainConfig(learning_rate=lr, weight_decay=wd,
                                      max_epochs=config.max_epochs,
                                      schedule=LrSchedule("cosine",
                                                          total_epochs=config.max_epochs),
                                      val_fraction=0.0, seed=config.seed)
            train_diffusion(net, schedule, train_merged, targets, dc)
            estimator = ProtoDmEstimator(net, schedule)
        else:
            net = PrototypeDnn(ProtoDnnConfig(
                latent_dim=ae.latent_dim, f_max_hz=config.f_max_hz), seed=config.seed)
            train_estimator(net, train_merged, targets, "mse_prototype", tc)
            estimator = ProtoDnnEstimator(net)
        report = evaluate(estimator, ae, val_merged, normalizers, seed=config.seed)
        return report.mean_lsd_db

    subject_ids = [s.subject_id for ds, s in splits["train"].pairs()
                   if s.has_anthropometry]
    result = cross_validate(config, folds=folds, trainer=trainer,
                            subject_ids=sorted(set(subject_ids)))
    with open(_path(config, "cv_table.json"), "w") as fh:
        json.dump({"best": result.best, "table": result.table,
                   "folds": result.folds}, fh, indent=2)
    if log:
        log(f"cv best: lr={result.best['learning_rate']} "
            f"wd={result.best['weight_decay']}")
    return result
