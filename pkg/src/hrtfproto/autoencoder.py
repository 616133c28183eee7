"""Autoencoder conditioned on source position, frequency, and ear.

Each (position, ear, frequency) token is processed independently: the encoder
maps the token's scalar log-magnitude to a D-dimensional latent through
hyperlinear layers whose weights are generated from the token's conditioning
vector, latents are mean-pooled over positions into a per-subject prototype,
and the decoder maps prototype rows back to scalars on any target grid.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dataio
from .dataio import MergedTrainingSet, NormalizationStats, apply_normalizer
from .nnblocks import FourierFeatureMap, HyperlinearLayer, LayerNorm, Module
from .numerics import engine as T
from .numerics.engine import ContractViolation, GradientTape, NumericError, Tensor, no_grad
from .numerics.optim import AdamW, LrSchedule, lr_schedule_step
from .serialization import (
    PROTOTYPE_MAGIC,
    load_checkpoint,
    read_blob,
    restore_parameters,
    save_checkpoint,
    write_blob,
)

COND_DIM = 5  # [x/r (3), f/f_max, ear flag]
EAR_FLAGS = (1.0, -1.0)  # left, right
LSD_EPS = 1e-12


@dataclass
class AutoencoderConfig:
    latent_dim: int = 64
    hidden: int = 32
    gen_hidden: int = 64
    ffm_frequencies: int = 8
    f_max_hz: float = 20000.0
    dtype: str = "float32"


class ConditionedAutoencoder(Module):
    """Encoder/decoder stacks of two hyperlinear layers around norm + Mish."""

    def __init__(self, config: AutoencoderConfig, seed=0):
        super().__init__()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        k, h, hg, d = (config.ffm_frequencies, config.hidden,
                       config.gen_hidden, config.latent_dim)
        self.enc_ffm = FourierFeatureMap(k, COND_DIM, rng, dtype=dtype)
        self.enc_hl1 = HyperlinearLayer(1, h, self.enc_ffm, hg, rng, dtype=dtype)
        self.enc_norm = LayerNorm(h, dtype=dtype)
        self.enc_hl2 = HyperlinearLayer(h, d, self.enc_ffm, hg, rng, dtype=dtype)
        self.dec_ffm = FourierFeatureMap(k, COND_DIM, rng, dtype=dtype)
        self.dec_hl1 = HyperlinearLayer(d, h, self.dec_ffm, hg, rng, dtype=dtype)
        self.dec_norm = LayerNorm(h, dtype=dtype)
        self.dec_hl2 = HyperlinearLayer(h, 1, self.dec_ffm, hg, rng, dtype=dtype)
        self.frozen = False

    @property
    def latent_dim(self):
        return self.config.latent_dim

    def conditioning(self, positions, frequencies_hz, r):
        """Token conditioning grid of shape (B, 2, L, 5), row-major over tokens."""
        pos = np.asarray(positions, dtype=np.float64)
        f = np.asarray(frequencies_hz, dtype=np.float64)
        b, l = pos.shape[0], f.shape[0]
        u = pos / r
        fn = f / self.config.f_max_hz
        c = np.empty((b, 2, l, COND_DIM), dtype=np.dtype(self.config.dtype))
        c[..., 0:3] = u[:, None, None, :]
        c[..., 3] = fn[None, None, :]
        for ear, flag in enumerate(EAR_FLAGS):
            c[:, ear, :, 4] = flag
        return c

    def encode(self, magnitudes_norm, positions, frequencies_hz, r):
        """Normalized (B, 2L) magnitudes to a (B, 2L, D) latent field."""
        mags = magnitudes_norm if isinstance(magnitudes_norm, Tensor) else Tensor(
            np.asarray(magnitudes_norm, dtype=np.dtype(self.config.dtype)))
        b = mags.shape[0]
        l = len(frequencies_hz)
        if mags.shape != (b, 2 * l):
            raise ContractViolation(
                f"magnitudes shape {mags.shape} != (B, 2L) = ({b}, {2 * l})"
            )
        if np.asarray(positions).shape[0] != b:
            raise ContractViolation("positions row count must match magnitudes")
        cond = Tensor(self.conditioning(positions, frequencies_hz, r).reshape(-1, COND_DIM))
        x = T.reshape(mags, (b * 2 * l, 1))
        h = self.enc_hl1(cond, x)
        h = T.mish(self.enc_norm(h))
        z = self.enc_hl2(cond, h)
        return T.reshape(z, (b, 2 * l, self.latent_dim))

    def decode(self, prototype, positions, frequencies_hz, r):
        """Prototype (2L, D) to normalized magnitudes on any (B', 3) grid."""
        zbar = prototype if isinstance(prototype, Tensor) else Tensor(
            np.asarray(prototype, dtype=np.dtype(self.config.dtype)))
        b = np.asarray(positions).shape[0]
        l = len(frequencies_hz)
        d = self.latent_dim
        if zbar.shape != (2 * l, d):
            raise ContractViolation(f"prototype shape {zbar.shape} != ({2 * l}, {d})")
        cond = Tensor(self.conditioning(positions, frequencies_hz, r).reshape(-1, COND_DIM))
        z = T.broadcast_to(T.reshape(zbar, (1, 2 * l, d)), (b, 2 * l, d))
        z = T.reshape(z, (b * 2 * l, d))
        h = self.dec_hl1(cond, z)
        h = T.mish(self.dec_norm(h))
        y = self.dec_hl2(cond, h)
        return T.reshape(y, (b, 2 * l))

    def reconstruct(self, magnitudes_norm, positions, frequencies_hz, r,
                    decode_positions=None, decode_r=None):
        z = self.encode(magnitudes_norm, positions, frequencies_hz, r)
        zbar = pool_prototype(z)
        return self.decode(
            zbar,
            positions if decode_positions is None else decode_positions,
            frequencies_hz,
            r if decode_r is None else decode_r,
        )

    def decoder_modules(self):
        return (self.dec_ffm, self.dec_hl1, self.dec_norm, self.dec_hl2)

    def decoder_parameter_count(self):
        seen = set()
        total = 0
        for m in self.decoder_modules():
            for _, p in m.named_parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    total += p.size
        # shared decoder FFM is reported by the coder, not its generators
        total += self.dec_ffm.kappa.size if id(self.dec_ffm.kappa) not in seen else 0
        return total

    def decoder_hash(self):
        import hashlib

        h = hashlib.sha256()
        for m in self.decoder_modules():
            for name, p in m.named_parameters():
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def save(self, path, magnitude_stats=None):
        buffers = []
        for ds_id, stats in (magnitude_stats or {}).items():
            buffers.append((f"magstats:{ds_id}:mean", stats.mean))
            buffers.append((f"magstats:{ds_id}:std", stats.std))
        return save_checkpoint(path, "autoencoder", asdict(self.config), self, buffers)

    @classmethod
    def load(cls, path):
        kind, config, params, buffers = load_checkpoint(path)
        if kind != "autoencoder":
            raise ContractViolation(f"checkpoint kind {kind!r} is not an autoencoder")
        ae = cls(AutoencoderConfig(**config))
        restore_parameters(ae, params)
        stats = {}
        for key, arr in buffers.items():
            tag, ds_id, which = key.split(":")
            if tag != "magstats":
                continue
            stats.setdefault(ds_id, {})[which] = arr.astype(np.float64)
        mag_stats = {
            ds_id: NormalizationStats("per_dataset_magnitude", d["mean"], d["std"], [ds_id])
            for ds_id, d in stats.items()
        }
        return ae, mag_stats


def pool_prototype(latent_field):
    """Mean over the source-position axis: (B, 2L, D) -> (2L, D)."""
    z = latent_field if isinstance(latent_field, Tensor) else Tensor(latent_field)
    if z.ndim != 3:
        raise ContractViolation(f"latent field must be (B, 2L, D), got {z.shape}")
    return T.mean(z, axis=0)


# ---------------------------------------------------------------------------
# log-spectral distortion


def lsd(pred_db, truth_db, eps=LSD_EPS):
    """RMS-over-frequency distortion of dB magnitudes.

    Inputs are (..., L); leading axes index (subject, position, ear) in any
    arrangement. Returns (mean scalar, per-leading-index terms), both Tensors.
    """
    pred = pred_db if isinstance(pred_db, Tensor) else Tensor(pred_db)
    truth = truth_db if isinstance(truth_db, Tensor) else Tensor(
        np.asarray(truth_db, dtype=pred.dtype))
    if pred.shape != truth.shape:
        raise ContractViolation(f"shape mismatch: {pred.shape} vs {truth.shape}")
    diff = T.sub(pred, truth)
    msq = T.mean(T.mul(diff, diff), axis=-1)
    terms = T.sqrt(T.add(msq, eps))
    return T.mean(terms), terms


def lsd_pairs(pred_flat, truth_flat, num_freq_bins):
    """(B, 2L) dB tensors to (mean, per-(position, ear) terms)."""
    pred = pred_flat if isinstance(pred_flat, Tensor) else Tensor(pred_flat)
    b = pred.shape[0]
    shaped = T.reshape(pred, (b, 2, num_freq_bins))
    truth = np.asarray(truth_flat).reshape(b, 2, num_freq_bins)
    return lsd(shaped, truth)


def lsd_db_numpy(pred_db, truth_db):
    """Evaluation-path LSD on numpy arrays shaped (..., L); returns (mean, terms)."""
    diff = np.asarray(pred_db, dtype=np.float64) - np.asarray(truth_db, dtype=np.float64)
    terms = np.sqrt((diff**2).mean(axis=-1) + LSD_EPS)
    return float(terms.mean()), terms


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 300
    early_stop_patience: int = 20
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule("plateau"))
    val_fraction: float = 0.1
    seed: int = 0
    max_steps: int | None = None
    target_train_lsd: float | None = None
    log_every: int = 0


@dataclass
class PretrainResult:
    autoencoder: ConditionedAutoencoder
    magnitude_stats: dict
    prototypes: dict  # (dataset_id, subject_id) -> (2L, D) float32
    history: list
    val_ids: list


def _subject_loss(ae, stats, subject, positions, frequencies, r):
    mean = stats.mean.astype(np.dtype(ae.config.dtype))
    std = stats.std.astype(np.dtype(ae.config.dtype))
    x_norm = (subject.magnitudes_db - mean) / std
    pred_norm = ae.reconstruct(x_norm, positions, frequencies, r)
    pred_db = T.add(T.mul(pred_norm, Tensor(std)), Tensor(mean))
    loss, _ = lsd_pairs(pred_db, subject.magnitudes_db, len(frequencies))
    return loss


def mean_reconstruction_lsd(ae, stats_by_id, pairs):
    """Eval-mode reconstruction LSD in dB over (dataset, subject) pairs."""
    ae.eval()
    scores = []
    with no_grad():
        for ds, subject in pairs:
            stats = stats_by_id[ds.dataset_id]
            x_norm = apply_normalizer(stats, subject.magnitudes_db)
            pred_norm = ae.reconstruct(
                x_norm.astype(np.dtype(ae.config.dtype)),
                ds.positions, ds.frequencies_hz, ds.source_distance_m)
            pred_db = apply_normalizer(stats, pred_norm.data, inverse=True)
            score, _ = lsd_db_numpy(pred_db, subject.magnitudes_db)
            scores.append(score)
    ae.train()
    return float(np.mean(scores))


def compute_prototype(ae, stats, subject, positions, frequencies, r):
    """Eval-mode encoder + pooling; returns (2L, D) float32."""
    was_training = ae.training
    ae.eval()
    with no_grad():
        x_norm = apply_normalizer(stats, subject.magnitudes_db)
        z = ae.encode(x_norm.astype(np.dtype(ae.config.dtype)),
                      positions, frequencies, r)
        zbar = pool_prototype(z).data.astype(np.float32)
    ae.train(was_training)
    return zbar


def pretrain_autoencoder(ae: ConditionedAutoencoder, merged: MergedTrainingSet,
                         config: PretrainConfig) -> PretrainResult:
    """Minimize mean LSD (dB domain) over the merged training set.

    Magnitude normalizers are fitted per dataset from the supplied training
    subjects. A per-dataset validation split drives early stopping; the best
    weights are restored, all parameters frozen, and ground-truth prototypes
    emitted for every training subject.
    """
    rng = np.random.default_rng(config.seed)
    ae.bind_rng(rng)
    stats_by_id = dataio.fit_magnitude_normalizers(merged)

    val_pairs, train_pairs = [], []
    for ds in merged.datasets:
        ids = ds.subject_ids()
        n_val = 0
        if config.val_fraction > 0 and len(ids) > 1:
            n_val = max(1, round(config.val_fraction * len(ids)))
            n_val = min(n_val, len(ids) - 1)
        chosen = set(rng.choice(ids, size=n_val, replace=False)) if n_val else set()
        for subject in ds.subjects:
            (val_pairs if subject.subject_id in chosen else train_pairs).append((ds, subject))

    params = ae.parameters()
    opt = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = config.schedule
    best_val = np.inf
    best_state = None
    bad_epochs = 0
    history = []
    step = 0
    stop = False
    t0 = time.time()

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_pairs))
        epoch_losses = []
        for idx in order:
            ds, subject = train_pairs[idx]
            with GradientTape() as tape:
                loss = _subject_loss(ae, stats_by_id[ds.dataset_id], subject,
                                     ds.positions, ds.frequencies_hz, ds.source_distance_m)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"pretraining diverged: loss became {value} at step {step}"
                )
            grads = tape.gradients(loss, params)
            opt.step([grads[p] for p in params])
            epoch_losses.append(value)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
            if (config.target_train_lsd is not None
                    and value < config.target_train_lsd and step % 25 == 0):
                current = mean_reconstruction_lsd(ae, stats_by_id, train_pairs)
                if current < config.target_train_lsd:
                    stop = True
                    break

        train_lsd = float(np.mean(epoch_losses)) if epoch_losses else np.nan
        val_lsd = (mean_reconstruction_lsd(ae, stats_by_id, val_pairs)
                   if val_pairs else train_lsd)
        history.append({"epoch": epoch, "train_lsd": train_lsd, "val_lsd": val_lsd,
                        "lr": opt.lr, "seconds": time.time() - t0})
        if config.log_every and epoch % config.log_every == 0:
            print(f"[pretrain] epoch {epoch} train {train_lsd:.3f} dB "
                  f"val {val_lsd:.3f} dB lr {opt.lr:.2e}")

        if val_lsd < best_val - 1e-6:
            best_val = val_lsd
            best_state = [p.data.copy() for p in params]
            bad_epochs = 0
        else:
            bad_epochs += 1
        opt.lr = lr_schedule_step(sched, epoch, val_lsd, opt.lr)
        if stop or (val_pairs and bad_epochs >= config.early_stop_patience):
            break

    if best_state is not None and val_pairs and not stop:
        for p, data in zip(params, best_state):
            p.data = data

    ae.eval()
    ae.freeze()
    ae.frozen = True
    prototypes = {}
    for ds, subject in train_pairs + val_pairs:
        prototypes[(ds.dataset_id, subject.subject_id)] = compute_prototype(
            ae, stats_by_id[ds.dataset_id], subject,
            ds.positions, ds.frequencies_hz, ds.source_distance_m)
    return PretrainResult(
        autoencoder=ae,
        magnitude_stats=stats_by_id,
        prototypes=prototypes,
        history=history,
        val_ids=[s.subject_id for _, s in val_pairs],
    )


# ---------------------------------------------------------------------------
# prototype archive


def write_prototypes(path, prototypes: dict, num_freq_bins, latent_dim):
    """prototypes: {(dataset_id, subject_id): (2L, D) array}."""
    entries = sorted(prototypes.keys())
    header = {
        "format_version": 1,
        "D": latent_dim,
        "L": num_freq_bins,
        "row_layout": "rows 0..L-1 left ear, L..2L-1 right ear",
        "subjects": [{"dataset_id": d, "subject_id": s} for d, s in entries],
    }
    arrays = []
    for d, s in entries:
        arr = np.asarray(prototypes[(d, s)], dtype=np.float32)
        if arr.shape != (2 * num_freq_bins, latent_dim):
            raise ContractViolation(
                f"prototype for {(d, s)} has shape {arr.shape}, "
                f"expected {(2 * num_freq_bins, latent_dim)}"
            )
        arrays.append((f"prototype:{d}:{s}", arr))
    return write_blob(path, PROTOTYPE_MAGIC, header, arrays)


def read_prototypes(path):
    header, arrays = read_blob(path, PROTOTYPE_MAGIC)
    out = {}
    for meta in header["subjects"]:
        key = (meta["dataset_id"], meta["subject_id"])
        out[key] = arrays[f"prototype:{key[0]}:{key[1]}"]
    return out, header["L"], header["D"]


def fit_prototype_normalizer(prototypes) -> NormalizationStats:
    """Pooled per-(frequency, latent) stats over all (subject, ear) samples."""
    samples = []
    for arr in prototypes.values() if isinstance(prototypes, dict) else prototypes:
        arr = np.asarray(arr)
        l = arr.shape[0] // 2
        samples.append(arr[:l])
        samples.append(arr[l:])
    return dataio.fit_normalizer(np.stack(samples), "global_prototype")
