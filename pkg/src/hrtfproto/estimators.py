"""Anthropometry-to-prototype MLP and the direct full-grid baseline.

The prototype network predicts one z-scored prototype row per (ear,
frequency) query; the baseline maps anthropometry straight to a full B x L
magnitude grid for one ear and is therefore tied to a single measured grid.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .dataio import MergedTrainingSet, NormalizationStats
from .nnblocks import Dense, FcBlock, FourierFeatureMap, Module, count_parameters
from .numerics import engine as T
from .numerics.engine import ContractViolation, GradientTape, NumericError, Tensor, no_grad
from .numerics.optim import AdamW, LrSchedule, lr_schedule_step
from .serialization import load_checkpoint, restore_parameters, save_checkpoint

__all__ = [
    "PrototypeDnn", "ProtoDnnConfig", "HrtfDnn", "HrtfDnnConfig",
    "EstimatorTargets", "EstimatorTrainConfig", "train_estimator",
    "count_parameters", "proto_dnn_forward", "hrtf_dnn_forward",
]


@dataclass
class ProtoDnnConfig:
    anthro_dim: int = 23
    ffm_frequencies: int = 16
    hidden: int = 128
    latent_dim: int = 64
    dropout: float = 0.5
    f_max_hz: float = 20000.0
    dtype: str = "float32"


class PrototypeDnn(Module):
    """[z-scored anthropometry ++ FFM(f/f_max)] -> two FC blocks -> row of D."""

    def __init__(self, config: ProtoDnnConfig = None, seed=0, **overrides):
        super().__init__()
        config = config or ProtoDnnConfig(**overrides)
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        in_dim = config.anthro_dim + 2 * config.ffm_frequencies
        self.ffm = FourierFeatureMap(config.ffm_frequencies, 1, rng, dtype=dtype)
        self.block1 = FcBlock(in_dim, config.hidden, config.dropout, rng, dtype=dtype)
        self.block2 = FcBlock(config.hidden, config.hidden, config.dropout, rng, dtype=dtype)
        self.out = Dense(config.hidden, config.latent_dim, rng, dtype=dtype)

    def forward(self, alpha_norm, f_norm):
        """alpha_norm (N, J), f_norm (N,) in [0, 1] -> (N, D) z-scored rows."""
        alpha = alpha_norm if isinstance(alpha_norm, Tensor) else Tensor(
            np.asarray(alpha_norm, dtype=np.dtype(self.config.dtype)))
        f = np.asarray(f_norm.data if isinstance(f_norm, Tensor) else f_norm)
        if np.any(f < 0.0) or np.any(f > 1.0 + 1e-9):
            raise ContractViolation("frequency outside [0, f_max]")
        f = f.reshape(-1, 1).astype(np.dtype(self.config.dtype))
        x = T.concat([alpha, self.ffm.embed(Tensor(f))], axis=-1)
        return self.out(self.block2(self.block1(x)))

    __call__ = forward

    def predict_rows(self, alpha_norm, frequencies_hz):
        """Eval-mode (L, D) z-scored prototype rows for one ear's anthropometry."""
        was = self.training
        self.eval()
        f_norm = np.asarray(frequencies_hz, dtype=np.float64) / self.config.f_max_hz
        alpha = np.tile(np.asarray(alpha_norm, dtype=np.float64), (f_norm.size, 1))
        with no_grad():
            rows = self.forward(alpha.astype(np.dtype(self.config.dtype)), f_norm).data
        self.train(was)
        return rows

    def save(self, path, anthro_stats=None, proto_stats=None):
        buffers = []
        if anthro_stats is not None:
            buffers += [("anthro:mean", anthro_stats.mean), ("anthro:std", anthro_stats.std)]
        if proto_stats is not None:
            buffers += [("proto:mean", proto_stats.mean), ("proto:std", proto_stats.std)]
        return save_checkpoint(path, "proto_dnn", asdict(self.config), self, buffers)

    @classmethod
    def load(cls, path):
        kind, config, params, buffers = load_checkpoint(path)
        if kind != "proto_dnn":
            raise ContractViolation(f"checkpoint kind {kind!r} is not proto_dnn")
        net = cls(ProtoDnnConfig(**config))
        restore_parameters(net, params)
        return net, _stats_from_buffers(buffers)


def _stats_from_buffers(buffers):
    stats = {}
    if "anthro:mean" in buffers:
        stats["anthro"] = NormalizationStats(
            "global_anthro", buffers["anthro:mean"].astype(np.float64),
            buffers["anthro:std"].astype(np.float64))
    if "proto:mean" in buffers:
        stats["prototype"] = NormalizationStats(
            "global_prototype", buffers["proto:mean"].astype(np.float64),
            buffers["proto:std"].astype(np.float64))
    return stats


def proto_dnn_forward(net: PrototypeDnn, alpha_norm, f_hz):
    """One z-scored prototype row for a frequency given in Hz."""
    if f_hz < 0 or f_hz > net.config.f_max_hz:
        raise ContractViolation(f"frequency {f_hz} outside [0, {net.config.f_max_hz}]")
    out = net.forward(np.asarray(alpha_norm)[None, :],
                      np.asarray([f_hz / net.config.f_max_hz]))
    return T.reshape(out, (net.config.latent_dim,))


@dataclass
class HrtfDnnConfig:
    anthro_dim: int = 23
    hidden1: int = 64
    hidden2: int = 512
    num_positions: int = 1250
    num_freq_bins: int = 128
    dropout: float = 0.5
    dataset_id: str = ""
    dtype: str = "float32"


class HrtfDnn(Module):
    """Direct anthropometry -> B x L magnitudes, one ear per forward pass.

    The output head is zero-initialized: with 82M scalars on the full-size
    grid a random init costs more than the rest of the network combined and
    starts the predictions at the normalized mean anyway.
    """

    def __init__(self, config: HrtfDnnConfig = None, seed=0, **overrides):
        super().__init__()
        config = config or HrtfDnnConfig(**overrides)
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        self.block1 = FcBlock(config.anthro_dim, config.hidden1, config.dropout, rng, dtype=dtype)
        self.block2 = FcBlock(config.hidden1, config.hidden2, config.dropout, rng, dtype=dtype)
        self.out = Dense(config.hidden2, config.num_positions * config.num_freq_bins,
                         rng, dtype=dtype, init="zeros")

    def forward(self, alpha_norm):
        alpha = alpha_norm if isinstance(alpha_norm, Tensor) else Tensor(
            np.asarray(alpha_norm, dtype=np.dtype(self.config.dtype)))
        return self.out(self.block2(self.block1(alpha)))

    __call__ = forward

    def predict_grid(self, alpha_norm):
        """Eval-mode (B, L) normalized magnitudes, row-major position-major."""
        was = self.training
        self.eval()
        with no_grad():
            flat = self.forward(np.asarray(alpha_norm)[None, :]).data[0]
        self.train(was)
        return flat.reshape(self.config.num_positions, self.config.num_freq_bins)

    def save(self, path, anthro_stats=None, magnitude_stats=None):
        buffers = []
        if anthro_stats is not None:
            buffers += [("anthro:mean", anthro_stats.mean), ("anthro:std", anthro_stats.std)]
        if magnitude_stats is not None:
            buffers += [("mag:mean", magnitude_stats.mean), ("mag:std", magnitude_stats.std)]
        return save_checkpoint(path, "hrtf_dnn", asdict(self.config), self, buffers)

    @classmethod
    def load(cls, path):
        kind, config, params, buffers = load_checkpoint(path)
        if kind != "hrtf_dnn":
            raise ContractViolation(f"checkpoint kind {kind!r} is not hrtf_dnn")
        net = cls(HrtfDnnConfig(**config))
        restore_parameters(net, params)
        stats = _stats_from_buffers(buffers)
        if "mag:mean" in buffers:
            stats["magnitude"] = NormalizationStats(
                "per_dataset_magnitude", buffers["mag:mean"].astype(np.float64),
                buffers["mag:std"].astype(np.float64))
        return net, stats


def hrtf_dnn_forward(net: HrtfDnn, alpha_norm):
    """Flat B*L vector of normalized magnitudes for one ear."""
    return net.forward(np.asarray(alpha_norm)[None, :])[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class EstimatorTargets:
    """Ground-truth targets and the normalizers the loss needs."""

    anthro_stats: NormalizationStats
    prototypes: dict | None = None           # (dataset_id, subject_id) -> (2L, D)
    prototype_stats: NormalizationStats | None = None
    magnitude_stats: dict | None = None      # dataset_id -> stats over 2L channels


@dataclass
class EstimatorTrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 300
    early_stop_patience: int = 20
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule("plateau"))
    batch_size: int = 512
    val_fraction: float = 0.1
    seed: int = 0
    max_steps: int | None = None
    log_every: int = 0


@dataclass
class EstimatorTrainResult:
    net: Module
    history: list
    best_val: float


def _norm_alpha(stats, subject, ear):
    return ((subject.anthropometry(ear).values - stats.mean) / stats.std)


def _prototype_rows(merged, targets):
    """Design rows for the prototype network: one per (subject, ear, bin)."""
    l = merged.num_freq_bins
    f_norm = merged.datasets[0].frequencies_hz / merged.f_max_hz
    pstats = targets.prototype_stats
    alphas, freqs, rows, owners = [], [], [], []
    for ds, subject in merged.pairs():
        if not subject.has_anthropometry:
            continue
        zbar = targets.prototypes[(ds.dataset_id, subject.subject_id)]
        for ear in (0, 1):
            a = _norm_alpha(targets.anthro_stats, subject, ear)
            z = (zbar[ear * l : (ear + 1) * l] - pstats.mean) / pstats.std
            alphas.append(np.tile(a, (l, 1)))
            freqs.append(f_norm)
            rows.append(z)
            owners.extend([subject.subject_id] * l)
    return (np.concatenate(alphas), np.concatenate(freqs),
            np.concatenate(rows), np.asarray(owners))


def _magnitude_rows(merged, targets):
    """Design rows for the baseline: one per (subject, ear), full grid target."""
    ds = merged.datasets[0]
    l = merged.num_freq_bins
    alphas, mags, ears, owners = [], [], [], []
    for d, subject in merged.pairs():
        if not subject.has_anthropometry:
            continue
        for ear in (0, 1):
            alphas.append(_norm_alpha(targets.anthro_stats, subject, ear))
            mags.append(subject.magnitudes_db[:, ear * l : (ear + 1) * l])
            ears.append(ear)
            owners.append(subject.subject_id)
    return (np.stack(alphas), np.stack(mags), np.asarray(ears),
            np.asarray(owners), ds)


def train_estimator(net, train_set: MergedTrainingSet, targets: EstimatorTargets,
                    loss_kind: str, config: EstimatorTrainConfig) -> EstimatorTrainResult:
    """Train either estimator with AdamW, plateau schedule, early stopping.

    mse_prototype: samples are (subject, ear, frequency) rows against z-scored
    prototype rows; merged multi-grid sets are fine because prototypes are
    grid-independent. lsd_magnitude: samples are (subject, ear) rows against
    the full dB grid; refused on merged sets whose source positions differ.
    """
    if loss_kind not in ("mse_prototype", "lsd_magnitude"):
        raise ContractViolation(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "lsd_magnitude" and not train_set.uses_single_grid():
        raise ContractViolation(
            "cannot train the direct-grid baseline on merged datasets with "
            "incompatible source positions; its output layer is tied to one grid"
        )
    rng = np.random.default_rng(config.seed)
    net.bind_rng(rng)
    dtype = np.dtype(net.config.dtype)

    if loss_kind == "mse_prototype":
        alphas, freqs, rows, owners = _prototype_rows(train_set, targets)
        data_size = alphas.shape[0]
    else:
        alphas, mags, ears, owners, ds0 = _magnitude_rows(train_set, targets)
        stats = targets.magnitude_stats[ds0.dataset_id]
        l = train_set.num_freq_bins
        data_size = alphas.shape[0]

    subject_ids = sorted(set(owners.tolist()))
    n_val = 0
    if config.val_fraction > 0 and len(subject_ids) > 1:
        n_val = min(max(1, round(config.val_fraction * len(subject_ids))),
                    len(subject_ids) - 1)
    val_subjects = set(rng.choice(subject_ids, size=n_val, replace=False)) if n_val else set()
    is_val = np.asarray([o in val_subjects for o in owners])
    train_idx = np.flatnonzero(~is_val)
    val_idx = np.flatnonzero(is_val)

    def batch_loss(idx):
        a = Tensor(alphas[idx].astype(dtype))
        if loss_kind == "mse_prototype":
            pred = net.forward(a, freqs[idx])
            diff = T.sub(pred, Tensor(rows[idx].astype(dtype)))
            return T.mean(T.mul(diff, diff))
        pred = net.forward(a)
        n = idx.size
        mean_rows = np.stack([stats.mean[e * l : (e + 1) * l] for e in ears[idx]])
        std_rows = np.stack([stats.std[e * l : (e + 1) * l] for e in ears[idx]])
        shaped = T.reshape(pred, (n, ds0.num_positions, l))
        pred_db = T.add(
            T.mul(shaped, Tensor(std_rows[:, None, :].astype(dtype))),
            Tensor(mean_rows[:, None, :].astype(dtype)))
        diff = T.sub(pred_db, Tensor(mags[idx].astype(dtype)))
        terms = T.sqrt(T.add(T.mean(T.mul(diff, diff), axis=-1), 1e-12))
        return T.mean(terms)

    params = net.parameters()
    opt = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = config.schedule
    history = []
    best_val = np.inf
    best_state = None
    bad = 0
    step = 0
    stop = False
    t0 = time.time()
    batch = config.batch_size

    for epoch in range(config.max_epochs):
        net.train()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, batch):
            idx = order[start : start + batch]
            with GradientTape() as tape:
                loss = batch_loss(idx)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"estimator training diverged at step {step}")
            grads = tape.gradients(loss, params)
            opt.step([grads[p] for p in params])
            losses.append(value)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
        net.eval()
        train_loss = float(np.mean(losses)) if losses else np.nan
        if val_idx.size:
            with no_grad():
                val_loss = float(batch_loss(val_idx).data)
        else:
            val_loss = train_loss
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": opt.lr,
                        "seconds": time.time() - t0})
        if config.log_every and epoch % config.log_every == 0:
            print(f"[estimator] epoch {epoch} train {train_loss:.5f} "
                  f"val {val_loss:.5f} lr {opt.lr:.2e}")
        if val_loss < best_val - 1e-9:
            best_val = val_loss
            best_state = [p.data.copy() for p in params]
            bad = 0
        else:
            bad += 1
        opt.lr = lr_schedule_step(sched, epoch, val_loss, opt.lr)
        if stop or (val_idx.size and bad >= config.early_stop_patience):
            break

    if best_state is not None and val_idx.size and not stop:
        for p, data in zip(params, best_state):
            p.data = data
    net.eval()
    return EstimatorTrainResult(net=net, history=history, best_val=float(best_val))
