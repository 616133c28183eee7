"""Engine-level tests: gradients, optimizer, schedules, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_operator, operator_registry
from hrtfproto import numerics as nm
from hrtfproto.numerics import engine as T
from hrtfproto.numerics.engine import (
    ContractViolation,
    GradientTape,
    NumericError,
    Tensor,
)
from hrtfproto.numerics.optim import (
    AdamW,
    AdamWState,
    LrSchedule,
    adamw_step,
    clip_global_norm,
    lr_schedule_step,
)


def _names():
    return sorted(operator_registry(np.random.default_rng(0)))


@pytest.mark.parametrize("name", _names())
def test_operator_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    tensors, fn = operator_registry(rng)[name]
    check_operator(name, tensors, fn, rng)


def test_backward_quadratic():
    p = nm.tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradientTape() as tape:
        loss = T.sum(T.mul(p, p))
    g = tape.gradients(loss, [p])[p]
    np.testing.assert_allclose(g.data, [2.0, 4.0, 6.0], rtol=1e-6)


def test_backward_mish_at_zero_is_exactly_tanh_log2():
    x = nm.tensor(np.asarray(0.0, dtype=np.float64), requires_grad=True)
    with GradientTape() as tape:
        y = T.mish(x)
    g = float(tape.gradients(y, [x])[x].data)
    assert abs(g - 0.6) < 1e-12


def test_backward_unused_param_gets_zeros():
    p = nm.tensor([1.0, 2.0], requires_grad=True)
    q = nm.tensor([3.0], requires_grad=True)
    with GradientTape() as tape:
        loss = T.sum(T.mul(p, p))
    g = tape.gradients(loss, [p, q])
    assert np.all(g[q].data == 0.0)


def test_backward_rejects_non_scalar_loss():
    p = nm.tensor([1.0, 2.0], requires_grad=True)
    with GradientTape() as tape:
        y = T.mul(p, p)
    with pytest.raises(ContractViolation):
        tape.gradients(y, [p])


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_backward_names_failing_op_on_nonfinite_gradient():
    x = nm.tensor([0.0], requires_grad=True)
    with GradientTape(check_finite=True) as tape:
        loss = T.sum(T.sqrt(x))
    with pytest.raises(NumericError, match="sqrt"):
        tape.gradients(loss, [x])


def test_tape_is_consumed_after_backward():
    p = nm.tensor([1.0], requires_grad=True)
    with GradientTape() as tape:
        loss = T.sum(T.mul(p, p))
    tape.gradients(loss, [p])
    with pytest.raises(ContractViolation):
        tape.gradients(loss, [p])


def test_backward_gradients_uses_recording_tape():
    p = nm.tensor([2.0], requires_grad=True)
    with GradientTape():
        loss = T.sum(T.mul(p, p))
    g = nm.backward_gradients(loss, [p])
    assert float(g[p].data[0]) == pytest.approx(4.0)


def test_forward_deterministic_given_seed():
    x = Tensor(np.random.default_rng(3).standard_normal((20, 20)))
    outs = []
    for _ in range(2):
        y = T.dropout(x, 0.4, rng=np.random.default_rng(11), training=True)
        outs.append(y.data.copy())
    assert np.array_equal(outs[0], outs[1])


def test_dropout_eval_mode_is_identity():
    x = Tensor(np.random.default_rng(3).standard_normal(50))
    y = T.dropout(x, 0.9, rng=None, training=False)
    assert np.array_equal(y.data, x.data)


def test_dropout_train_scales_by_keep_probability():
    x = Tensor(np.ones(10000))
    y = T.dropout(x, 0.25, rng=np.random.default_rng(0), training=True)
    kept = y.data[y.data != 0]
    assert np.allclose(kept, 1.0 / 0.75)
    assert abs((y.data != 0).mean() - 0.75) < 0.02


def test_layer_norm_standardizes_before_affine():
    x = Tensor(np.random.default_rng(5).standard_normal((32, 64)))
    y = T.layer_norm(x)
    assert np.abs(y.data.mean(axis=-1)).max() < 1e-6
    assert np.abs(y.data.var(axis=-1) - 1.0).max() < 1e-4


def test_numpy_first_expressions_route_through_tensor_ops():
    t = nm.tensor([1.0, 2.0], requires_grad=True)
    with GradientTape() as tape:
        loss = T.sum(np.array([3.0, 4.0]) * t)
    np.testing.assert_allclose(tape.gradients(loss, [t])[t].data, [3.0, 4.0])
    assert isinstance(np.array([1.0, 1.0]) - t, Tensor)


def test_matmul_requires_2d():
    with pytest.raises(ContractViolation):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_zero_grad_zero_decay_leaves_param():
    p = nm.tensor([1.0, -2.0], requires_grad=True)
    before = p.data.copy()
    adamw_step(AdamWState(learning_rate=0.1), [p], [np.zeros(2)])
    assert np.array_equal(p.data, before)


def test_adamw_decay_only():
    p = nm.tensor([1.0], requires_grad=True)
    adamw_step(AdamWState(learning_rate=0.1, weight_decay=0.1), [p], [np.zeros(1)])
    assert float(p.data[0]) == pytest.approx(0.99, abs=1e-7)


def test_adamw_single_step_hand_value():
    # m-hat = v-hat = 1 after one unit-grad step, so the update is ~lr
    p = nm.tensor([1.0], requires_grad=True)
    state = AdamWState(learning_rate=1e-3)
    adamw_step(state, [p], [np.ones(1)])
    assert float(p.data[0]) == pytest.approx(0.999, abs=1e-6)
    assert state.step_count == 1


def test_adamw_shape_mismatch_rejected():
    p = nm.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        adamw_step(AdamWState(learning_rate=0.1), [p], [np.zeros(3)])


def test_adamw_object_matches_functional():
    rng = np.random.default_rng(0)
    data = rng.standard_normal(5).astype(np.float32)
    p1 = nm.tensor(data.copy(), requires_grad=True)
    p2 = nm.tensor(data.copy(), requires_grad=True)
    opt = AdamW([p1], lr=1e-2, weight_decay=0.01)
    state = AdamWState(learning_rate=1e-2, weight_decay=0.01)
    for i in range(5):
        g = rng.standard_normal(5).astype(np.float32)
        opt.step([g])
        adamw_step(state, [p2], [g.copy()])
    np.testing.assert_allclose(p1.data, p2.data, rtol=1e-6)


def test_clip_global_norm_passthrough_below_threshold():
    g = [np.array([0.3, 0.4])]
    out = clip_global_norm(g, 1.0)
    assert np.array_equal(out[0], g[0])


def test_clip_global_norm_scales_to_unit():
    out = clip_global_norm([np.array([3.0, 4.0])], 1.0)
    np.testing.assert_allclose(out[0], [0.6, 0.8], rtol=1e-6)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12),
       st.floats(0.1, 10.0))
@settings(max_examples=60, deadline=None)
def test_clip_global_norm_properties(values, max_norm):
    g = np.asarray(values, dtype=np.float64)
    out = clip_global_norm([g], max_norm)[0]
    before = float(np.linalg.norm(g))
    after = float(np.linalg.norm(out))
    assert after <= min(before, max_norm) + 1e-6
    assert np.all(np.abs(out) <= np.abs(g) + 1e-12)  # never increases any entry


# ---------------------------------------------------------------------------
# schedules


def test_cosine_schedule_endpoints():
    sched = LrSchedule("cosine", total_epochs=100, min_lr=0.0)
    assert lr_schedule_step(sched, 0, 1.0, 1e-3) == pytest.approx(1e-3)
    assert lr_schedule_step(sched, 100, 1.0, 1e-3) == pytest.approx(0.0, abs=1e-12)


def test_cosine_schedule_midpoint():
    sched = LrSchedule("cosine", total_epochs=100, min_lr=0.0, base_lr=1e-3)
    assert lr_schedule_step(sched, 50, 1.0, 5e-4) == pytest.approx(5e-4)


def test_plateau_schedule_halves_after_patience():
    # simulate an epoch loop that never improves
    sched = LrSchedule("plateau", factor=0.5, patience=10, min_lr=1e-6)
    lr = 1e-3
    lr = lr_schedule_step(sched, 0, 1.0, lr)  # sets the best
    for epoch in range(1, 11):
        lr = lr_schedule_step(sched, epoch, 1.0, lr)
    assert lr == pytest.approx(5e-4)


def test_plateau_schedule_resets_on_improvement():
    sched = LrSchedule("plateau", factor=0.5, patience=3)
    lr = 1e-3
    losses = [1.0, 1.0, 0.9, 1.0, 1.0, 1.0]
    for epoch, loss in enumerate(losses):
        lr = lr_schedule_step(sched, epoch, loss, lr)
    assert lr == pytest.approx(5e-4)  # only the post-improvement stretch counts


def test_plateau_respects_min_lr():
    sched = LrSchedule("plateau", factor=0.5, patience=1, min_lr=4e-4)
    lr = 1e-3
    for epoch in range(10):
        lr = lr_schedule_step(sched, epoch, 1.0, lr)
    assert lr == pytest.approx(4e-4)


def test_schedule_validation():
    with pytest.raises(ContractViolation):
        LrSchedule("plateau", factor=1.5)
    with pytest.raises(ContractViolation):
        LrSchedule("plateau", patience=0)
    with pytest.raises(ContractViolation):
        LrSchedule("nope")
    with pytest.raises(ContractViolation):
        lr_schedule_step(LrSchedule("cosine"), -1, 1.0, 1e-3)
