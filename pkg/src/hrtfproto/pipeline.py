"""End-to-end orchestration: individualize, evaluate, cross-validate.

An estimator plus the frozen decoder and the fitted normalizers turn raw
anthropometry into dB magnitudes on any target grid; evaluation scores test
subjects on their own grids and reports mean and spread across subjects.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .autoencoder import ConditionedAutoencoder, lsd_db_numpy
from .dataio import (
    ANTHRO_NAMES,
    HrtfDataset,
    MergedTrainingSet,
    NormalizationStats,
    apply_normalizer,
)
from .diffusion import DdimSchedule, PrototypeUnet, ddim_sample
from .estimators import PrototypeDnn
from .numerics.engine import ContractViolation, no_grad

LR_WD_RANGE = (1e-4, 1e-3)


@dataclass
class NormalizerSet:
    """Everything individualize needs to move between raw and z-scored spaces."""

    anthro: NormalizationStats
    prototype: NormalizationStats | None = None
    magnitude: dict = field(default_factory=dict)  # dataset_id -> stats


@dataclass
class ExperimentConfig:
    dataset_paths: list = field(default_factory=list)
    train_ids: dict = field(default_factory=dict)     # dataset_id -> [subject ids]
    test_ids: dict = field(default_factory=dict)
    ae_only_ids: dict = field(default_factory=dict)
    estimator: str = "proto_dnn"                      # proto_dnn | proto_dm | hrtf_dnn
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 300
    schedule_kind: str = "plateau"
    sampler_w: float = 4.0
    sampler_eta: float = 0.2
    sampler_t_infer: int = 500
    seed: int = 0
    out_dir: str = "out"
    latent_dim: int = 64
    num_freq_bins: int = 128
    f_max_hz: float = 20000.0
    lr_grid: list = field(default_factory=lambda: [1e-4, 3e-4, 1e-3])
    wd_grid: list = field(default_factory=lambda: [1e-4, 1e-3])
    override_search_range: bool = False

    def validate(self):
        lo, hi = LR_WD_RANGE
        if not self.override_search_range:
            for name, value in (("learning_rate", self.learning_rate),
                                ("weight_decay", self.weight_decay)):
                if not lo <= value <= hi:
                    raise ContractViolation(
                        f"{name}={value} outside [{lo}, {hi}]; set "
                        f"override_search_range to use it anyway"
                    )
            for grid in (self.lr_grid, self.wd_grid):
                for value in grid:
                    if not lo <= value <= hi:
                        raise ContractViolation(
                            f"grid value {value} outside [{lo}, {hi}]"
                        )
        if self.estimator not in ("proto_dnn", "proto_dm", "hrtf_dnn"):
            raise ContractViolation(f"unknown estimator {self.estimator!r}")
        return self

    @classmethod
    def from_json(cls, path):
        import json

        with open(path) as fh:
            data = json.load(fh)
        return cls(**data).validate()

    def to_json(self, path):
        import json

        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
        return path


# ---------------------------------------------------------------------------
# prototype estimator adapters


class ProtoDnnEstimator:
    """Deterministic per-row prototype prediction."""

    kind = "proto_dnn"

    def __init__(self, net: PrototypeDnn):
        self.net = net

    def predict(self, alpha_norm, frequencies_hz, seed=0):
        return self.net.predict_rows(alpha_norm, frequencies_hz)

    def parameter_count(self):
        return self.net.parameter_count()


class ProtoDmEstimator:
    """DDIM sampling of one z-scored prototype per (ear, seed)."""

    kind = "proto_dm"

    def __init__(self, net: PrototypeUnet, schedule: DdimSchedule):
        self.net = net
        self.schedule = schedule

    def predict(self, alpha_norm, frequencies_hz, seed=0):
        return ddim_sample(self.net, self.schedule, alpha_norm, frequencies_hz, seed)

    def parameter_count(self):
        return self.net.parameter_count()


class OraclePrototypeEstimator:
    """Returns the ground-truth (encoder-pooled) prototype, z-scored.

    Upper-bound reference: with the frozen decoder this reproduces the
    autoencoder reconstruction.
    """

    kind = "oracle"

    def __init__(self, prototypes: dict, prototype_stats: NormalizationStats):
        self.prototypes = prototypes
        self.stats = prototype_stats
        self._current = None  # (dataset_id, subject_id, ear) set by evaluate

    def bind(self, dataset_id, subject_id, ear):
        self._current = (dataset_id, subject_id, ear)

    def predict(self, alpha_norm, frequencies_hz, seed=0):
        if self._current is None:
            raise ContractViolation("oracle estimator needs bind(dataset, subject, ear)")
        dataset_id, subject_id, ear = self._current
        zbar = self.prototypes[(dataset_id, subject_id)]
        l = zbar.shape[0] // 2
        rows = zbar[ear * l : (ear + 1) * l]
        return (rows - self.stats.mean) / self.stats.std

    def parameter_count(self):
        return 0


# ---------------------------------------------------------------------------
# individualization


def _seed_for(seed, ear, tag=0):
    return int(np.uint64(seed) * np.uint64(1000003) + np.uint64(2 * tag + ear))


def individualize(estimator, decoder: ConditionedAutoencoder, normalizers: NormalizerSet,
                  alpha_left, alpha_right, target_positions, frequencies_hz, r,
                  seed=0, magnitude_profile=None, subject_tag=0):
    """Raw per-ear anthropometry to (B', 2L) dB magnitudes on any grid."""
    if normalizers.prototype is None:
        raise ContractViolation("missing prototype normalizer profile")
    profile = magnitude_profile
    if profile is None:
        if len(normalizers.magnitude) != 1:
            raise ContractViolation(
                f"magnitude profile required; available: {sorted(normalizers.magnitude)}"
            )
        profile = next(iter(normalizers.magnitude))
    if profile not in normalizers.magnitude:
        raise ContractViolation(
            f"missing magnitude normalizer profile {profile!r}; "
            f"available: {sorted(normalizers.magnitude)}"
        )
    l = len(frequencies_hz)
    d = decoder.latent_dim
    rows = []
    for ear, alpha in ((0, alpha_left), (1, alpha_right)):
        alpha_norm = apply_normalizer(normalizers.anthro, np.asarray(alpha, dtype=np.float64))
        z_rows = estimator.predict(alpha_norm, frequencies_hz,
                                   seed=_seed_for(seed, ear, subject_tag))
        if z_rows.shape != (l, d):
            raise ContractViolation(
                f"estimator returned {z_rows.shape}, decoder expects ({l}, {d})"
            )
        rows.append(apply_normalizer(normalizers.prototype, z_rows, inverse=True))
    zbar = np.concatenate(rows, axis=0).astype(np.float32)
    with no_grad():
        pred_norm = decoder.decode(zbar, target_positions, frequencies_hz, r).data
    mag_stats = normalizers.magnitude[profile]
    return apply_normalizer(mag_stats, pred_norm, inverse=True)


# ---------------------------------------------------------------------------
# minimum-phase reconstruction


def min_phase_reconstruct(magnitude_db, n_fft):
    """Minimum-phase impulse response from a one-sided dB magnitude.

    The input bins are uniform from 0 to Nyquist; they are linearly
    interpolated (in dB) onto the n_fft half grid, mirrored, folded through
    the real cepstrum, and inverted. |FFT(h)| reproduces the interpolated
    magnitude exactly up to float rounding.
    """
    mag = np.asarray(magnitude_db, dtype=np.float64)
    if mag.ndim != 1 or mag.size < 2:
        raise ContractViolation("magnitude must be a vector of at least 2 bins")
    if not np.all(np.isfinite(mag)):
        raise ContractViolation("magnitude must be finite")
    if n_fft < 2 * mag.size:
        raise ContractViolation(f"n_fft={n_fft} must be at least 2L={2 * mag.size}")
    half = n_fft // 2 + 1
    grid_in = np.linspace(0.0, 1.0, mag.size)
    grid_out = np.linspace(0.0, 1.0, half)
    mag_half = np.interp(grid_out, grid_in, mag)
    log_mag = np.empty(n_fft)
    log_mag[:half] = mag_half * (np.log(10.0) / 20.0)
    log_mag[half:] = log_mag[1 : n_fft - half + 1][::-1]
    cep = np.fft.ifft(log_mag).real
    folded = np.zeros(n_fft)
    folded[0] = cep[0]
    folded[1 : n_fft // 2] = 2.0 * cep[1 : n_fft // 2]
    folded[n_fft // 2] = cep[n_fft // 2]
    spectrum = np.exp(np.fft.fft(folded))
    return np.fft.ifft(spectrum).real


def hrir_export(magnitudes_db, num_freq_bins, n_fft=None):
    """(B, 2L) dB to (B, 2, n_fft) minimum-phase impulse responses, zero ITD."""
    mags = np.asarray(magnitudes_db)
    l = num_freq_bins
    if n_fft is None:
        n_fft = 4 * l
    out = np.empty((mags.shape[0], 2, n_fft), dtype=np.float32)
    for b in range(mags.shape[0]):
        for ear in (0, 1):
            out[b, ear] = min_phase_reconstruct(mags[b, ear * l : (ear + 1) * l], n_fft)
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationReport:
    per_subject: list                 # {subject_id, dataset_id, lsd_db}
    mean_lsd_db: float
    std_lsd_db: float
    per_dataset: dict
    param_count: int
    runtime_seconds: float
    metadata: dict = field(default_factory=dict)

    def write_csv(self, report_path, summary_path):
        with open(report_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "dataset_id", "lsd_db"])
            for row in self.per_subject:
                writer.writerow([row["subject_id"], row["dataset_id"],
                                 f"{row['lsd_db']:.6f}"])
        with open(summary_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mean", "std", "param_count"])
            writer.writerow([f"{self.mean_lsd_db:.6f}", f"{self.std_lsd_db:.6f}",
                             self.param_count])
        return report_path, summary_path


class PrototypeRoutePredictor:
    """estimator -> inverse z-score -> frozen decoder -> inverse z-score."""

    def __init__(self, estimator, decoder, normalizers: NormalizerSet):
        self.estimator = estimator
        self.decoder = decoder
        self.normalizers = normalizers

    def predict_magnitudes_db(self, ds: HrtfDataset, subject, seed=0, tag=0):
        if getattr(self.estimator, "kind", "") == "oracle":
            rows = []
            for ear in (0, 1):
                self.estimator.bind(ds.dataset_id, subject.subject_id, ear)
                z = self.estimator.predict(None, ds.frequencies_hz)
                rows.append(apply_normalizer(self.normalizers.prototype, z, inverse=True))
            zbar = np.concatenate(rows, axis=0).astype(np.float32)
            with no_grad():
                pred = self.decoder.decode(zbar, ds.positions, ds.frequencies_hz,
                                           ds.source_distance_m).data
            return apply_normalizer(self.normalizers.magnitude[ds.dataset_id],
                                    pred, inverse=True)
        return individualize(
            self.estimator, self.decoder, self.normalizers,
            subject.anthropometry_left.values, subject.anthropometry_right.values,
            ds.positions, ds.frequencies_hz, ds.source_distance_m,
            seed=seed, magnitude_profile=ds.dataset_id, subject_tag=tag)

    def parameter_count(self):
        return self.estimator.parameter_count() + self.decoder.decoder_parameter_count()


class MeanMagnitudePredictor:
    """Predicts the training population's mean magnitude on each native grid."""

    def __init__(self, train_set: MergedTrainingSet):
        self.means = {}
        for ds in train_set.datasets:
            self.means[ds.dataset_id] = np.mean(
                [s.magnitudes_db for s in ds.subjects], axis=0)

    def predict_magnitudes_db(self, ds, subject, seed=0, tag=0):
        return self.means[ds.dataset_id]

    def parameter_count(self):
        return 0


class HrtfDnnPredictor:
    """Direct baseline: one forward per ear, de-normalized to dB."""

    def __init__(self, net, anthro_stats, magnitude_stats):
        self.net = net
        self.anthro_stats = anthro_stats
        self.magnitude_stats = magnitude_stats

    def predict_magnitudes_db(self, ds, subject, seed=0, tag=0):
        if ds.num_positions != self.net.config.num_positions:
            raise ContractViolation(
                "baseline network is tied to its training grid "
                f"({self.net.config.num_positions} positions), got {ds.num_positions}"
            )
        l = ds.num_freq_bins
        out = np.empty((ds.num_positions, 2 * l), dtype=np.float64)
        for ear in (0, 1):
            alpha_norm = apply_normalizer(self.anthro_stats,
                                          subject.anthropometry(ear).values)
            grid = self.net.predict_grid(alpha_norm)
            stats = self.magnitude_stats[ds.dataset_id]
            out[:, ear * l : (ear + 1) * l] = (
                grid * stats.std[ear * l : (ear + 1) * l]
                + stats.mean[ear * l : (ear + 1) * l])
        return out

    def parameter_count(self):
        return self.net.parameter_count()


def evaluate(estimator, decoder, test_set, normalizers: NormalizerSet = None,
             seed=0) -> EvaluationReport:
    """Score each test subject on its own grid; aggregate across subjects.

    `estimator` is either a prototype estimator (paired with the frozen
    decoder) or any object with predict_magnitudes_db (direct baselines and
    test stubs). Diffusion estimators get one fixed-seed sample per subject.
    """
    t0 = time.time()
    if hasattr(estimator, "predict_magnitudes_db"):
        predictor = estimator
    else:
        predictor = PrototypeRoutePredictor(estimator, decoder, normalizers)
    datasets = test_set.datasets if isinstance(test_set, MergedTrainingSet) else [test_set]
    per_subject = []
    tag = 0
    for ds in datasets:
        l = ds.num_freq_bins
        for subject in ds.subjects:
            if not subject.has_anthropometry and not hasattr(estimator, "predict_magnitudes_db"):
                raise ContractViolation(
                    f"test subject {subject.subject_id} lacks anthropometry")
            pred = predictor.predict_magnitudes_db(ds, subject, seed=seed, tag=tag)
            truth = subject.magnitudes_db.reshape(ds.num_positions, 2, l)
            _, terms = lsd_db_numpy(pred.reshape(ds.num_positions, 2, l), truth)
            per_subject.append({
                "subject_id": subject.subject_id,
                "dataset_id": ds.dataset_id,
                "lsd_db": float(terms.mean()),
            })
            tag += 1
    scores = np.array([row["lsd_db"] for row in per_subject])
    per_dataset = {}
    for ds in datasets:
        sub = scores[[i for i, row in enumerate(per_subject)
                      if row["dataset_id"] == ds.dataset_id]]
        per_dataset[ds.dataset_id] = {
            "mean": float(sub.mean()) if sub.size else float("nan"),
            "std": float(sub.std(ddof=1)) if sub.size > 1 else 0.0,
            "count": int(sub.size),
        }
    pc = predictor.parameter_count() if hasattr(predictor, "parameter_count") else 0
    return EvaluationReport(
        per_subject=per_subject,
        mean_lsd_db=float(scores.mean()),
        std_lsd_db=float(scores.std(ddof=1)) if scores.size > 1 else 0.0,
        per_dataset=per_dataset,
        param_count=int(pc),
        runtime_seconds=time.time() - t0,
        metadata={"seed": seed,
                  "aggregation": "per-subject mean over (position, ear); "
                                 "std across subjects (ddof=1)"},
    )


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvResult:
    best: dict
    table: list
    folds: list


def make_folds(subject_ids, folds, seed=0):
    """Disjoint, exhaustive subject-level folds; every subject validates once."""
    ids = list(subject_ids)
    if len(ids) < folds:
        raise ContractViolation(f"{len(ids)} subjects cannot form {folds} folds")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    return [order[i::folds] for i in range(folds)]


def cross_validate(config: ExperimentConfig, folds=5, trainer=None,
                   subject_ids=None) -> CvResult:
    """Grid-search (lr, wd) by mean validation loss over subject-level folds.

    trainer(train_ids, val_ids, lr, wd) -> validation loss. The default
    trainer is built by the CLI from the configured artifacts; tests inject
    stubs. Retraining on the full set with the winner is the caller's step.
    """
    config.validate()
    if trainer is None:
        raise ContractViolation("cross_validate needs a trainer callable")
    if subject_ids is None:
        subject_ids = [i for ids in config.train_ids.values() for i in ids]
    fold_sets = make_folds(subject_ids, folds, seed=config.seed)
    all_ids = set(subject_ids)
    table = []
    for lr in config.lr_grid:
        for wd in config.wd_grid:
            losses = []
            for k, val_ids in enumerate(fold_sets):
                train_ids = sorted(all_ids - set(val_ids))
                losses.append(float(trainer(train_ids, list(val_ids), lr, wd)))
            table.append({"learning_rate": lr, "weight_decay": wd,
                          "fold_losses": losses, "mean_loss": float(np.mean(losses))})
    best = min(table, key=lambda row: row["mean_loss"])
    return CvResult(
        best={"learning_rate": best["learning_rate"],
              "weight_decay": best["weight_decay"]},
        table=table,
        folds=fold_sets,
    )
