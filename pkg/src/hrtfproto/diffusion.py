"""Latent diffusion over prototypes: schedule, 1D U-Net, DDIM sampler, trainer.

One sample is a single (subject, ear) prototype laid out channel-major as
(D, L). The U-Net is conditioned three ways: anthropometry through
cross-attention, timestep plus per-token frequency through AdaLN modulation.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .dataio import NormalizationStats
from .nnblocks import (
    AdaLnBlock,
    AttentionBlock,
    Conv1d,
    Dense,
    Dropout,
    FourierFeatureMap,
    Module,
)
from .numerics import engine as T
from .numerics.engine import ContractViolation, GradientTape, NumericError, Tensor, no_grad
from .numerics.optim import AdamW, LrSchedule, clip_global_norm, lr_schedule_step
from .serialization import load_checkpoint, restore_parameters, save_checkpoint


@dataclass
class DdimSchedule:
    """Linear beta schedule with cached cumulative products.

    beta[i] is the noising rate at timestep t = i+1; alpha_bar has length
    t_train+1 with alpha_bar[0] = 1 so t_prev = 0 denotes the clean sample.
    """

    t_train: int = 1000
    t_infer: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    eta: float = 0.2
    guidance: float = 4.0
    clamp: tuple = (-3.0, 3.0)
    beta: np.ndarray = None
    alpha_bar: np.ndarray = None

    def __post_init__(self):
        self.clamp = tuple(self.clamp)
        if self.beta is None:
            if not 0.0 < self.beta_start < self.beta_end < 1.0:
                raise ContractViolation(
                    f"need 0 < beta_start < beta_end < 1, got "
                    f"({self.beta_start}, {self.beta_end})"
                )
            t = np.arange(self.t_train, dtype=np.float64)
            self.beta = self.beta_start + t / (self.t_train - 1) * (
                self.beta_end - self.beta_start
            )
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha_bar is None:
            self.alpha_bar = np.concatenate(
                [[1.0], np.cumprod(1.0 - self.beta)]
            )
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ContractViolation("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] <= 0 or self.alpha_bar[1] >= 1:
            raise ContractViolation("alpha_bar must stay in (0, 1) for t >= 1")

    def infer_timesteps(self):
        """Strictly increasing subsequence of t_infer steps ending at t_train."""
        if self.t_infer > self.t_train:
            raise ContractViolation("t_infer cannot exceed t_train")
        taus = np.round(
            np.linspace(self.t_train / self.t_infer, self.t_train, self.t_infer)
        ).astype(int)
        for i in range(1, len(taus)):  # de-duplicate after rounding
            if taus[i] <= taus[i - 1]:
                taus[i] = taus[i - 1] + 1
        if taus[0] <= 0 or taus[-1] != self.t_train:
            raise ContractViolation("inference timesteps out of range")
        return taus


def build_linear_schedule(t_train, beta_start=1e-4, beta_end=0.02, **kwargs) -> DdimSchedule:
    return DdimSchedule(t_train=t_train, beta_start=beta_start, beta_end=beta_end, **kwargs)


def q_sample(schedule: DdimSchedule, z0, t, eps):
    """Forward noising: sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps (numpy)."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.t_train):
        raise ContractViolation(f"timestep {t} outside [1, {schedule.t_train}]")
    ab = schedule.alpha_bar[t_arr]
    ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim)) if ab.ndim else ab
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond, eps_uncond, w):
    """Guided noise estimate (1+w)*cond - w*uncond."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ContractViolation("conditional/unconditional shapes differ")
    return (1.0 + w) * eps_cond - w * eps_uncond


def ddim_step(schedule: DdimSchedule, z_t, eps_tilde, t, t_prev, eta=None,
              fresh_noise=None):
    """One DDIM update t -> t_prev with z0-hat clamping.

    z0_hat = (z_t - sqrt(1-a_t) eps) / sqrt(a_t), clamped elementwise;
    sigma = eta sqrt((1-a_p)/(1-a_t)) sqrt(1 - a_t/a_p);
    z_prev = sqrt(a_p) z0_hat + sqrt(1-a_p-sigma^2) eps + sigma noise.
    """
    if not (0 <= t_prev < t <= schedule.t_train):
        raise ContractViolation(f"need t > t_prev >= 0 within schedule, got {t}, {t_prev}")
    if eta is None:
        eta = schedule.eta
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_tilde = np.asarray(eps_tilde, dtype=np.float64)
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    lo, hi = schedule.clamp
    z0_hat = np.clip((z_t - math.sqrt(1.0 - ab_t) * eps_tilde) / math.sqrt(ab_t), lo, hi)
    sigma2 = (eta**2) * ((1.0 - ab_p) / (1.0 - ab_t)) * (1.0 - ab_t / ab_p)
    if sigma2 > (1.0 - ab_p) + 1e-12:
        raise ContractViolation(
            f"eta={eta} too large for this schedule at t={t}: sigma^2 exceeds 1-alpha_bar"
        )
    out = math.sqrt(ab_p) * z0_hat + math.sqrt(max(0.0, 1.0 - ab_p - sigma2)) * eps_tilde
    if sigma2 > 0.0:
        if fresh_noise is None:
            raise ContractViolation("eta > 0 requires fresh noise")
        out = out + math.sqrt(sigma2) * np.asarray(fresh_noise)
    return out


def timestep_embedding(t, dim):
    """Standard sinusoidal embedding of integer timesteps, shape (N, dim)."""
    if dim % 2:
        raise ContractViolation("timestep embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------------------
# U-Net


@dataclass
class UnetConfig:
    latent_dim: int = 64
    channels: tuple = (64, 128, 256)
    num_tokens: int = 128
    heads: int = 8
    anthro_dim: int = 23
    anthro_emb_dim: int = 32
    cond_emb_dim: int = 192
    ffm_frequencies: int = 16
    dropout: float = 0.15
    f_max_hz: float = 20000.0
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(self.channels)


class ResnetBlock(Module):
    """Two {AdaLN, SiLU, conv} sub-blocks, dropout in the second, residual add."""

    def __init__(self, in_ch, out_ch, emb_dim, dropout, rng, dtype):
        super().__init__()
        self.ada1 = AdaLnBlock(in_ch, emb_dim, rng, dtype=dtype)
        self.conv1 = Conv1d(in_ch, out_ch, rng=rng, dtype=dtype)
        self.ada2 = AdaLnBlock(out_ch, emb_dim, rng, dtype=dtype)
        self.drop = Dropout(dropout)
        self.conv2 = Conv1d(out_ch, out_ch, rng=rng, dtype=dtype)
        self.skip = Conv1d(in_ch, out_ch, rng=rng, dtype=dtype) if in_ch != out_ch else None

    def forward(self, x, emb):
        # x: (N, C, L); emb: (N, L, E); AdaLN works token-major
        h = T.transpose(self.ada1(T.transpose(x, (0, 2, 1)), emb), (0, 2, 1))
        h = self.conv1(T.silu(h))
        h = T.transpose(self.ada2(T.transpose(h, (0, 2, 1)), emb), (0, 2, 1))
        h = self.conv2(self.drop(T.silu(h)))
        res = self.skip(x) if self.skip is not None else x
        return T.add(res, h)

    __call__ = forward


class TokenAttention(Module):
    """Self then cross attention over the token axis of (N, C, L) features."""

    def __init__(self, channels, heads, ctx_dim, dropout, rng, dtype):
        super().__init__()
        self.self_attn = AttentionBlock("self", channels, heads=heads,
                                        dropout=dropout, rng=rng, dtype=dtype)
        self.cross_attn = AttentionBlock("cross", channels, heads=heads,
                                         ctx_dim=ctx_dim, dropout=dropout,
                                         rng=rng, dtype=dtype)

    def forward(self, x, context):
        tokens = T.transpose(x, (0, 2, 1))
        tokens = self.self_attn(tokens)
        tokens = self.cross_attn(tokens, context)
        return T.transpose(tokens, (0, 2, 1))

    __call__ = forward


class PrototypeUnet(Module):
    """Conditional noise predictor over (D, L) prototype fields.

    Two stride-2 down-sampling stages, a middle stage, two linear-upsampling
    stages with concatenated skips and channel-reducing convs, and an output
    projection. Cross-attention sees the anthropometry embedding (or the
    learned null embedding when conditioning is disabled); AdaLN modulation is
    driven by the sum of timestep and per-token frequency embeddings.
    """

    def __init__(self, config: UnetConfig = None, seed=0, **overrides):
        super().__init__()
        config = config or UnetConfig(**overrides)
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        d = config.latent_dim
        c0, c1, c2 = config.channels
        e = config.cond_emb_dim
        p = config.dropout
        heads = config.heads

        self.time_dense = Dense(e, e, rng, dtype=dtype)
        self.freq_ffm = FourierFeatureMap(config.ffm_frequencies, 1, rng, dtype=dtype)
        self.freq_dense = Dense(2 * config.ffm_frequencies, e, rng, dtype=dtype)
        self.anthro_dense = Dense(config.anthro_dim, config.anthro_emb_dim, rng, dtype=dtype)
        self.null_ctx = Tensor(np.zeros(config.anthro_emb_dim, dtype=dtype), requires_grad=True)

        self.conv_in = Conv1d(d, c0, rng=rng, dtype=dtype)
        self.ds1_res = ResnetBlock(c0, c0, e, p, rng, dtype)
        self.ds1_attn = TokenAttention(c0, heads, config.anthro_emb_dim, p, rng, dtype)
        self.ds1_down = Conv1d(c0, c0, stride=2, rng=rng, dtype=dtype)
        self.ds2_res = ResnetBlock(c0, c1, e, p, rng, dtype)
        self.ds2_attn = TokenAttention(c1, heads, config.anthro_emb_dim, p, rng, dtype)
        self.ds2_down = Conv1d(c1, c1, stride=2, rng=rng, dtype=dtype)
        self.mid_res = ResnetBlock(c1, c2, e, p, rng, dtype)
        self.mid_attn = TokenAttention(c2, heads, config.anthro_emb_dim, p, rng, dtype)
        self.us1_reduce = Conv1d(c2 + c1, c1, rng=rng, dtype=dtype)
        self.us1_res = ResnetBlock(c1, c1, e, p, rng, dtype)
        self.us1_attn = TokenAttention(c1, heads, config.anthro_emb_dim, p, rng, dtype)
        self.us2_reduce = Conv1d(c1 + c0, c0, rng=rng, dtype=dtype)
        self.us2_res = ResnetBlock(c0, c0, e, p, rng, dtype)
        self.us2_attn = TokenAttention(c0, heads, config.anthro_emb_dim, p, rng, dtype)
        self.conv_out = Conv1d(c0, d, rng=rng, dtype=dtype, init_scale=0.1)
        self.uncond_trained = True

    def _freq_embeddings(self, f_norm):
        """Per-token conditioning embeddings at each resolution level."""
        f = np.asarray(f_norm, dtype=np.float64)
        levels = [f, f.reshape(-1, 2).mean(axis=1), f.reshape(-1, 4).mean(axis=1)]
        dtype = np.dtype(self.config.dtype)
        out = []
        for fl in levels:
            emb = self.freq_dense(self.freq_ffm.embed(Tensor(fl[:, None].astype(dtype))))
            out.append(T.reshape(emb, (1,) + emb.shape))
        return out

    def context(self, alpha_norm, cond):
        """(N, 1, anthro_emb_dim) cross-attention context with null fallback.

        cond may be a bool (whole batch) or a per-sample keep mask.
        """
        alpha = alpha_norm if isinstance(alpha_norm, Tensor) else Tensor(
            np.asarray(alpha_norm, dtype=np.dtype(self.config.dtype)))
        n = alpha.shape[0]
        emb = T.silu(self.anthro_dense(alpha))
        null = T.reshape(self.null_ctx, (1, -1))
        if isinstance(cond, (bool, np.bool_)):
            keep = np.full((n, 1), 1.0 if cond else 0.0, dtype=np.dtype(self.config.dtype))
        else:
            keep = np.asarray(cond, dtype=np.dtype(self.config.dtype)).reshape(n, 1)
        ctx = T.add(T.mul(emb, Tensor(keep)), T.mul(null, Tensor(1.0 - keep)))
        return T.reshape(ctx, (n, 1, self.config.anthro_emb_dim))

    def forward(self, z_t, t, alpha_norm, f_norm, cond=True, trace=None):
        """Noise estimate with the shape of z_t: (N, D, L), L divisible by 4."""
        z = z_t if isinstance(z_t, Tensor) else Tensor(
            np.asarray(z_t, dtype=np.dtype(self.config.dtype)))
        if z.ndim != 3 or z.shape[1] != self.config.latent_dim:
            raise ContractViolation(
                f"input must be (N, {self.config.latent_dim}, L), got {z.shape}")
        n, _, length = z.shape
        if length % 4:
            raise ContractViolation("token length must be divisible by 4")
        if len(np.asarray(f_norm)) != length:
            raise ContractViolation("frequency grid length must match tokens")

        dtype = np.dtype(self.config.dtype)
        temb_in = timestep_embedding(t, self.config.cond_emb_dim).astype(dtype)
        if temb_in.shape[0] == 1 and n > 1:
            temb_in = np.repeat(temb_in, n, axis=0)
        temb = self.time_dense(Tensor(temb_in))
        temb = T.reshape(temb, (n, 1, self.config.cond_emb_dim))
        femb = self._freq_embeddings(f_norm)
        embs = [T.add(fe, temb) for fe in femb]
        ctx = self.context(alpha_norm, cond)

        def note(stage, tensor):
            if trace is not None:
                trace.append((stage, tensor.shape[-1]))

        h = self.conv_in(z)
        note("in", h)
        s1 = self.ds1_attn(self.ds1_res(h, embs[0]), ctx)
        h = self.ds1_down(s1)
        note("ds1", h)
        s2 = self.ds2_attn(self.ds2_res(h, embs[1]), ctx)
        h = self.ds2_down(s2)
        note("ds2", h)
        h = self.mid_attn(self.mid_res(h, embs[2]), ctx)
        note("mid", h)
        h = T.upsample_linear_2x(h)
        h = self.us1_reduce(T.concat([h, s2], axis=1))
        h = self.us1_attn(self.us1_res(h, embs[1]), ctx)
        note("us1", h)
        h = T.upsample_linear_2x(h)
        h = self.us2_reduce(T.concat([h, s1], axis=1))
        h = self.us2_attn(self.us2_res(h, embs[0]), ctx)
        note("us2", h)
        out = self.conv_out(h)
        note("out", out)
        return out

    __call__ = forward

    def save(self, path, schedule: DdimSchedule = None, anthro_stats=None, proto_stats=None):
        config = {"unet": asdict(self.config), "uncond_trained": self.uncond_trained}
        if schedule is not None:
            config["schedule"] = {
                "t_train": schedule.t_train, "t_infer": schedule.t_infer,
                "beta_start": schedule.beta_start, "beta_end": schedule.beta_end,
                "eta": schedule.eta, "guidance": schedule.guidance,
                "clamp": list(schedule.clamp),
            }
        buffers = []
        if anthro_stats is not None:
            buffers += [("anthro:mean", anthro_stats.mean), ("anthro:std", anthro_stats.std)]
        if proto_stats is not None:
            buffers += [("proto:mean", proto_stats.mean), ("proto:std", proto_stats.std)]
        return save_checkpoint(path, "proto_dm", config, self, buffers)

    @classmethod
    def load(cls, path):
        kind, config, params, buffers = load_checkpoint(path)
        if kind != "proto_dm":
            raise ContractViolation(f"checkpoint kind {kind!r} is not proto_dm")
        net = cls(UnetConfig(**config["unet"]))
        net.uncond_trained = bool(config.get("uncond_trained", True))
        restore_parameters(net, params)
        schedule = DdimSchedule(**config["schedule"]) if "schedule" in config else None
        stats = {}
        if "anthro:mean" in buffers:
            stats["anthro"] = NormalizationStats(
                "global_anthro", buffers["anthro:mean"].astype(np.float64),
                buffers["anthro:std"].astype(np.float64))
        if "proto:mean" in buffers:
            stats["prototype"] = NormalizationStats(
                "global_prototype", buffers["proto:mean"].astype(np.float64),
                buffers["proto:std"].astype(np.float64))
        return net, schedule, stats


def unet_forward(net: PrototypeUnet, z_t, t, alpha_norm, frequencies_hz,
                 cond_enabled=True):
    """Noise estimate for (N, D, L) states with frequencies given in Hz."""
    f_norm = np.asarray(frequencies_hz, dtype=np.float64) / net.config.f_max_hz
    return net.forward(z_t, t, alpha_norm, f_norm, cond=cond_enabled)


# ---------------------------------------------------------------------------
# sampling


def ddim_sample(net, schedule: DdimSchedule, alpha_norm, frequencies_hz, seed,
                initial_state=None, eta=None, guidance=None):
    """Sample one z-scored per-ear prototype (L, D) from seeded noise.

    Two network calls per step (conditional + unconditional) while guidance is
    active; a single conditional call when w == 0.
    """
    w = schedule.guidance if guidance is None else guidance
    eta = schedule.eta if eta is None else eta
    if w != 0.0 and not getattr(net, "uncond_trained", True):
        warnings.warn(
            "guidance w != 0 but the unconditional branch was never trained "
            "(conditioning dropout was 0); samples will use an untrained branch",
            RuntimeWarning,
        )
    f = np.asarray(frequencies_hz, dtype=np.float64)
    f_norm = f / net.config.f_max_hz
    d, length = net.config.latent_dim, f.size
    rng = np.random.default_rng(seed)
    x = (np.asarray(initial_state, dtype=np.float64).reshape(1, d, length)
         if initial_state is not None
         else rng.standard_normal((1, d, length)))
    alpha = np.asarray(alpha_norm, dtype=np.float64).reshape(1, -1)
    taus = schedule.infer_timesteps()
    prevs = np.concatenate([[0], taus[:-1]])
    was = net.training
    net.eval()
    with no_grad():
        for t, t_prev in zip(taus[::-1], prevs[::-1]):
            t_arr = np.asarray([t])
            eps_c = net.forward(x.astype(np.dtype(net.config.dtype)), t_arr, alpha,
                                f_norm, cond=True).data.astype(np.float64)
            if w != 0.0:
                eps_u = net.forward(x.astype(np.dtype(net.config.dtype)), t_arr, alpha,
                                    f_norm, cond=False).data.astype(np.float64)
                eps = cfg_combine(eps_c, eps_u, w)
            else:
                eps = eps_c
            noise = rng.standard_normal(x.shape) if eta > 0 else None
            x = ddim_step(schedule, x, eps, int(t), int(t_prev), eta=eta,
                          fresh_noise=noise)
    net.train(was)
    return x[0].T.astype(np.float32)  # (L, D)


# ---------------------------------------------------------------------------
# training


@dataclass
class DiffusionTrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 300
    early_stop_patience: int = 30
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule("cosine", total_epochs=300))
    batch_size: int = 8
    p_drop: float = 0.1
    grad_clip: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0
    max_steps: int | None = None
    log_every: int = 0


@dataclass
class DiffusionTrainResult:
    net: PrototypeUnet
    history: list
    best_val: float


def train_diffusion(net: PrototypeUnet, schedule: DdimSchedule,
                    train_set, targets, config: DiffusionTrainConfig) -> DiffusionTrainResult:
    """Noise-prediction MSE training with CFG conditioning dropout.

    One sample is a (subject, ear) z-scored prototype transposed to (D, L).
    targets is an EstimatorTargets carrying prototypes plus anthro/prototype
    normalizers. Gradient global norm is clipped before each AdamW step.
    """
    rng = np.random.default_rng(config.seed)
    net.bind_rng(rng)
    dtype = np.dtype(net.config.dtype)
    l = train_set.num_freq_bins
    f_norm = train_set.datasets[0].frequencies_hz / train_set.f_max_hz
    pstats = targets.prototype_stats

    z0s, alphas, owners = [], [], []
    for ds, subject in train_set.pairs():
        if not subject.has_anthropometry:
            continue
        zbar = targets.prototypes[(ds.dataset_id, subject.subject_id)]
        for ear in (0, 1):
            z = (zbar[ear * l : (ear + 1) * l] - pstats.mean) / pstats.std
            z0s.append(z.T)  # (D, L)
            a = subject.anthropometry(ear).values
            alphas.append((a - targets.anthro_stats.mean) / targets.anthro_stats.std)
            owners.append(subject.subject_id)
    z0s = np.stack(z0s)
    alphas = np.stack(alphas)
    owners = np.asarray(owners)

    subject_ids = sorted(set(owners.tolist()))
    n_val = 0
    if config.val_fraction > 0 and len(subject_ids) > 1:
        n_val = min(max(1, round(config.val_fraction * len(subject_ids))),
                    len(subject_ids) - 1)
    val_subjects = set(rng.choice(subject_ids, size=n_val, replace=False)) if n_val else set()
    is_val = np.asarray([o in val_subjects for o in owners])
    train_idx = np.flatnonzero(~is_val)
    val_idx = np.flatnonzero(is_val)

    net.uncond_trained = config.p_drop > 0.0

    def batch_loss(idx, step_rng):
        t = step_rng.integers(1, schedule.t_train + 1, size=idx.size)
        eps = step_rng.standard_normal((idx.size,) + z0s.shape[1:])
        z_t = q_sample(schedule, z0s[idx], t, eps).astype(dtype)
        keep = (step_rng.random(idx.size) >= config.p_drop).astype(np.float64)
        pred = net(z_t, t, alphas[idx].astype(dtype), f_norm, cond=keep)
        diff = T.sub(pred, Tensor(eps.astype(dtype)))
        return T.mean(T.mul(diff, diff))

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

    for epoch in range(config.max_epochs):
        net.train()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            with GradientTape() as tape:
                loss = batch_loss(idx, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"diffusion training diverged at step {step}")
            grads = tape.gradients(loss, params)
            clipped = clip_global_norm([grads[p] for p in params], config.grad_clip)
            opt.step(clipped)
            losses.append(value)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
        net.eval()
        train_loss = float(np.mean(losses)) if losses else np.nan
        if val_idx.size:
            # fixed draws each epoch so the early-stopping signal is comparable
            val_rng = np.random.default_rng(config.seed + 7777)
            with no_grad():
                val_loss = float(batch_loss(val_idx, val_rng).data)
        else:
            val_loss = train_loss
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": opt.lr,
                        "seconds": time.time() - t0})
        if config.log_every and epoch % config.log_every == 0:
            print(f"[diffusion] epoch {epoch} train {train_loss:.4f} "
                  f"val {val_loss:.4f} lr {opt.lr:.2e}")
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
    return DiffusionTrainResult(net=net, history=history, best_val=float(best_val))
