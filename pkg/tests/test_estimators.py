"""Prototype network and direct-grid baseline: shapes, counts, training."""

import numpy as np
import pytest

from hrtfproto.dataio import (
    fibonacci_sphere,
    fit_anthro_normalizer,
    fit_normalizer,
    frequency_grid,
    merge_datasets,
    synth_generate,
)
from hrtfproto.estimators import (
    EstimatorTargets,
    EstimatorTrainConfig,
    HrtfDnn,
    HrtfDnnConfig,
    PrototypeDnn,
    ProtoDnnConfig,
    count_parameters,
    hrtf_dnn_forward,
    proto_dnn_forward,
    train_estimator,
)
from hrtfproto.numerics.engine import ContractViolation
from hrtfproto.numerics.optim import LrSchedule


def test_proto_dnn_eval_deterministic():
    net = PrototypeDnn(seed=0).eval()
    alpha = np.random.default_rng(0).standard_normal(23)
    freqs = frequency_grid(8)
    a = net.predict_rows(alpha, freqs)
    b = net.predict_rows(alpha, freqs)
    assert np.array_equal(a, b)
    assert a.shape == (8, 64)


def test_proto_dnn_output_length_and_input_dim():
    net = PrototypeDnn(seed=1)
    assert net.config.latent_dim == 64
    assert net.block1.dense.w.shape[0] == 23 + 32  # J + 2K
    out = proto_dnn_forward(net.eval(), np.zeros(23), 1234.5)
    assert out.shape == (64,)


def test_proto_dnn_rejects_out_of_range_frequency():
    net = PrototypeDnn(seed=0).eval()
    with pytest.raises(ContractViolation):
        proto_dnn_forward(net, np.zeros(23), 25000.0)
    with pytest.raises(ContractViolation):
        proto_dnn_forward(net, np.zeros(23), -1.0)


def test_proto_dnn_parameter_count_closed_form():
    net = PrototypeDnn(seed=0)
    j, k, h, d = 23, 16, 128, 64
    in_dim = j + 2 * k
    expected = (
        (in_dim * h + h) + 2 * h          # first FC block + layer norm affine
        + (h * h + h) + 2 * h             # second FC block + layer norm affine
        + (h * d + d)                     # output dense
        + k                               # trainable FFM frequencies
    )
    assert count_parameters(net) == expected == 32464
    assert 32000 <= count_parameters(net) <= 33000


def test_hrtf_dnn_parameter_count_closed_form():
    net = HrtfDnn(HrtfDnnConfig(num_positions=1250, num_freq_bins=128), seed=0)
    expected = (23 * 64 + 64) + 2 * 64 + (64 * 512 + 512) + 2 * 512 \
        + (512 * 160000 + 160000)
    n = count_parameters(net)
    assert n == expected == 82_115_968
    assert abs(n - 82_000_000) / 82_000_000 < 0.01
    flat = hrtf_dnn_forward(net.eval(), np.zeros(23))
    assert flat.shape == (160000,)


def test_hrtf_dnn_eval_deterministic_and_row_major():
    net = HrtfDnn(HrtfDnnConfig(num_positions=5, num_freq_bins=3), seed=2).eval()
    # give the zero-initialized head some structure
    rng = np.random.default_rng(0)
    net.out.w.data[:] = rng.standard_normal(net.out.w.shape).astype(np.float32) * 0.1
    alpha = rng.standard_normal(23)
    g1 = net.predict_grid(alpha)
    g2 = net.predict_grid(alpha)
    assert np.array_equal(g1, g2)
    flat = hrtf_dnn_forward(net, alpha).data
    np.testing.assert_array_equal(g1, flat.reshape(5, 3))


def test_zero_parameter_stub_counts_zero():
    from hrtfproto.nnblocks import Module

    assert count_parameters(Module()) == 0


# ---------------------------------------------------------------------------
# training


def merged_with_prototypes(s=2, b=6, l=4, d=3, datasets=1, same_grid=True, seed=0,
                           ear_symmetric=False):
    parts = []
    rng = np.random.default_rng(seed)
    for i in range(datasets):
        b_i = b if same_grid else b + 2 * i
        pos = fibonacci_sphere(b_i)
        parts.append(synth_generate(seed + i, s, pos, frequency_grid(l), 1.0,
                                    dataset_id=f"ds{i}"))
    merged = merge_datasets(parts)
    protos = {}
    for ds, subject in merged.pairs():
        z = rng.standard_normal((2 * l, d)).astype(np.float32)
        if ear_symmetric:
            z[l:] = z[:l]  # synthetic heads are mirror-symmetric across ears
        protos[(ds.dataset_id, subject.subject_id)] = z
    anthro = fit_anthro_normalizer(merged)
    # stats from a wider pool, as the real pipeline fits them on the full set
    pool = rng.standard_normal((10, l, d))
    pstats = fit_normalizer(pool, "global_prototype")
    from hrtfproto.dataio import fit_magnitude_normalizers

    targets = EstimatorTargets(anthro_stats=anthro, prototypes=protos,
                               prototype_stats=pstats,
                               magnitude_stats=fit_magnitude_normalizers(merged))
    return merged, targets, d


def quick_config(**kw):
    base = dict(learning_rate=1e-3, weight_decay=0.0, max_epochs=3,
                schedule=LrSchedule("plateau"), batch_size=16,
                val_fraction=0.0, seed=0)
    base.update(kw)
    return EstimatorTrainConfig(**base)


def test_hrtf_dnn_refuses_merged_grids():
    merged, targets, _ = merged_with_prototypes(datasets=2, same_grid=False)
    net = HrtfDnn(HrtfDnnConfig(num_positions=6, num_freq_bins=4), seed=0)
    with pytest.raises(ContractViolation, match="incompatible source positions"):
        train_estimator(net, merged, targets, "lsd_magnitude", quick_config())


def test_hrtf_dnn_trains_on_single_grid():
    merged, targets, _ = merged_with_prototypes(datasets=1)
    net = HrtfDnn(HrtfDnnConfig(num_positions=6, num_freq_bins=4), seed=0)
    result = train_estimator(net, merged, targets, "lsd_magnitude", quick_config())
    assert len(result.history) == 3
    assert np.isfinite(result.history[-1]["train_loss"])


def test_proto_dnn_trains_on_merged_grids():
    merged, targets, d = merged_with_prototypes(datasets=2, same_grid=False)
    net = PrototypeDnn(ProtoDnnConfig(ffm_frequencies=4, hidden=16, latent_dim=d),
                       seed=0)
    result = train_estimator(net, merged, targets, "mse_prototype", quick_config())
    assert np.isfinite(result.history[-1]["train_loss"])


def test_unknown_loss_kind_rejected():
    merged, targets, _ = merged_with_prototypes()
    with pytest.raises(ContractViolation):
        train_estimator(PrototypeDnn(seed=0), merged, targets, "nope", quick_config())


def test_single_subject_overfit_mse():
    merged, targets, d = merged_with_prototypes(s=1, b=4, l=4, d=2,
                                                ear_symmetric=True)
    net = PrototypeDnn(ProtoDnnConfig(ffm_frequencies=4, hidden=32, latent_dim=d,
                                      dropout=0.0), seed=0)
    result = train_estimator(net, merged, targets, "mse_prototype",
                             quick_config(max_epochs=2000, max_steps=800))
    assert result.history[-1]["train_loss"] < 1e-3


def test_training_history_tracks_running_best():
    merged, targets, d = merged_with_prototypes(s=4, b=4, l=4, d=2)
    net = PrototypeDnn(ProtoDnnConfig(ffm_frequencies=2, hidden=8, latent_dim=d),
                       seed=0)
    result = train_estimator(net, merged, targets, "mse_prototype",
                             quick_config(max_epochs=8, val_fraction=0.25))
    vals = [h["val_loss"] for h in result.history]
    running = np.minimum.accumulate(vals)
    assert np.all(np.diff(running) <= 1e-12)
    assert result.best_val == pytest.approx(running[-1])


def test_estimator_checkpoint_roundtrip(tmp_path):
    merged, targets, d = merged_with_prototypes()
    net = PrototypeDnn(ProtoDnnConfig(ffm_frequencies=2, hidden=8, latent_dim=d), seed=3)
    path = tmp_path / "p.ckpt"
    net.save(path, anthro_stats=targets.anthro_stats, proto_stats=targets.prototype_stats)
    back, stats = PrototypeDnn.load(path)
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), back.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    np.testing.assert_allclose(stats["anthro"].mean, targets.anthro_stats.mean, atol=1e-6)
    np.testing.assert_allclose(stats["prototype"].std, targets.prototype_stats.std,
                               rtol=1e-5)
