"""Block-level behavior: FFM, hyperlinear, FC blocks, attention, AdaLN."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference_check
from hrtfproto import nnblocks as nb
from hrtfproto.numerics import engine as T
from hrtfproto.numerics.engine import ContractViolation, GradientTape, Tensor


def make_ffm(k=4, dim=3, seed=0, dtype=np.float64):
    return nb.FourierFeatureMap(k, dim, np.random.default_rng(seed), dtype=dtype)


def test_ffm_zero_input_alternates_zero_one():
    ffm = make_ffm(k=5, dim=4)
    out = ffm.embed(np.zeros((2, 4))).data
    np.testing.assert_allclose(out[:, 0::2], 0.0, atol=1e-12)
    np.testing.assert_allclose(out[:, 1::2], 1.0, atol=1e-12)


def test_ffm_quarter_period():
    ffm = make_ffm(k=1, dim=1)
    ffm.kappa.data[:] = 1.0
    out = ffm.embed(np.array([[0.25]])).data[0]
    assert abs(out[0] - 1.0) < 1e-12  # sin(pi/2)
    assert abs(out[1]) < 1e-12        # cos(pi/2)


def test_ffm_output_length_is_2k():
    ffm = make_ffm(k=16, dim=1)
    assert ffm.embed(np.zeros((1, 1))).shape == (1, 32)
    assert ffm.output_dim == 32


def test_ffm_dimension_mismatch_rejected():
    with pytest.raises(ContractViolation):
        make_ffm(k=2, dim=3).embed(np.zeros((1, 2)))
    with pytest.raises(ContractViolation):
        make_ffm(k=2, dim=1).embed(np.array([[np.inf]]))


@given(st.integers(1, 6), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
@settings(max_examples=40, deadline=None)
def test_ffm_rows_lie_on_unit_circle(k, c):
    ffm = make_ffm(k=k, dim=2, seed=3)
    out = ffm.embed(np.array([c])).data[0]
    np.testing.assert_allclose(out[0::2] ** 2 + out[1::2] ** 2, 1.0, atol=1e-6)


def test_ffm_kappa_receives_gradient():
    ffm = make_ffm(k=3, dim=2)
    c = Tensor(np.random.default_rng(1).standard_normal((4, 2)))
    with GradientTape() as tape:
        loss = T.sum(ffm.embed(c))
    g = tape.gradients(loss, [ffm.kappa])[ffm.kappa]
    assert np.abs(g.data).max() > 0


def make_hyperlinear(in_dim=3, out_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    ffm = nb.FourierFeatureMap(2, 4, rng, dtype=np.float64)
    return nb.HyperlinearLayer(in_dim, out_dim, ffm, 8, rng, dtype=np.float64)


def test_hyper_generate_deterministic():
    hl = make_hyperlinear()
    c = Tensor(np.random.default_rng(2).standard_normal((5, 4)))
    w1, b1 = nb.hyper_generate(hl, c)
    w2, b2 = nb.hyper_generate(hl, c)
    assert np.array_equal(w1.data, w2.data) and np.array_equal(b1.data, b2.data)


def test_hyper_generate_zeroed_tail_gives_zero_output():
    hl = make_hyperlinear()
    hl.generator.fc_b.w.data[:] = 0.0
    hl.generator.fc_b.b.data[:] = 0.0
    c = Tensor(np.random.default_rng(2).standard_normal((5, 4)))
    x = Tensor(np.random.default_rng(3).standard_normal((5, 3)))
    w, b = nb.hyper_generate(hl, c)
    assert np.all(w.data == 0.0) and np.all(b.data == 0.0)
    assert np.all(nb.hyperlinear_apply(hl, c, x).data == 0.0)


def test_hyper_generator_flat_length():
    hl = make_hyperlinear(in_dim=1, out_dim=32)
    assert hl.generator.out_len == 64


def test_hyperlinear_identity_via_forced_generator():
    hl = make_hyperlinear(in_dim=3, out_dim=3)
    hl.generator.fc_b.w.data[:] = 0.0
    flat_identity = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    hl.generator.fc_b.b.data[:] = flat_identity
    x = Tensor(np.random.default_rng(4).standard_normal((6, 3)))
    c = Tensor(np.random.default_rng(5).standard_normal((6, 4)))
    out = nb.hyperlinear_apply(hl, c, x)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_hyperlinear_zero_input_returns_bias():
    hl = make_hyperlinear()
    c = Tensor(np.random.default_rng(6).standard_normal((4, 4)))
    _, b = nb.hyper_generate(hl, c)
    out = nb.hyperlinear_apply(hl, c, Tensor(np.zeros((4, 3))))
    np.testing.assert_allclose(out.data, b.data, atol=1e-12)


def test_hyperlinear_matches_manual_matrix_product():
    hl = make_hyperlinear(in_dim=2, out_dim=3)
    c = Tensor(np.random.default_rng(7).standard_normal((5, 4)))
    x = np.random.default_rng(8).standard_normal((5, 2))
    w, b = nb.hyper_generate(hl, c)
    manual = np.einsum("noi,ni->no", w.data, x) + b.data
    out = nb.hyperlinear_apply(hl, c, Tensor(x))
    np.testing.assert_allclose(out.data, manual, rtol=1e-10)


def test_hyperlinear_gradcheck_through_input_and_conditioning():
    hl = make_hyperlinear()
    rng = np.random.default_rng(9)
    c = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    weights = rng.standard_normal((3, 2))
    tensors = [c, x] + hl.parameters()
    finite_difference_check(
        lambda: T.sum(T.mul(hl(c, x), Tensor(weights))), tensors)


def make_fc_block(in_dim=5, out_dim=7, p=0.5, seed=0):
    return nb.FcBlock(in_dim, out_dim, p, np.random.default_rng(seed), dtype=np.float64)


def test_fc_block_eval_output_ignores_dropout_seed():
    block = make_fc_block().eval()
    x = Tensor(np.random.default_rng(1).standard_normal((4, 5)))
    block.bind_rng(np.random.default_rng(1))
    out1 = block(x).data.copy()
    block.bind_rng(np.random.default_rng(2))
    out2 = block(x).data.copy()
    assert np.array_equal(out1, out2)


def test_fc_block_all_negative_preactivations_give_zeros():
    block = make_fc_block(p=0.0).eval()
    block.norm.weight.data[:] = 0.0
    block.norm.bias.data[:] = -1.0
    x = Tensor(np.random.default_rng(2).standard_normal((3, 5)))
    assert np.all(block(x).data == 0.0)


def test_fc_block_shape_55_to_128():
    block = make_fc_block(in_dim=55, out_dim=128).eval()
    out = block(Tensor(np.zeros((2, 55))))
    assert out.shape == (2, 128)


def make_attention(kind="self", dim=8, heads=2, ctx_dim=None, seed=0):
    return nb.AttentionBlock(kind, dim, heads=heads, ctx_dim=ctx_dim,
                             rng=np.random.default_rng(seed), dtype=np.float64)


def test_attention_zero_value_projection_is_residual_identity():
    att = make_attention().eval()
    att.v_proj.w.data[:] = 0.0
    tokens = Tensor(np.random.default_rng(1).standard_normal((2, 5, 8)))
    np.testing.assert_allclose(att(tokens).data, tokens.data, atol=1e-12)


def test_attention_single_token_weight_is_one():
    att = make_attention().eval()
    tokens = Tensor(np.random.default_rng(2).standard_normal((3, 1, 8)))
    _, weights = att.forward(tokens, return_weights=True)
    np.testing.assert_allclose(weights.data, 1.0, atol=0)


def test_attention_weights_sum_to_one():
    att = make_attention().eval()
    tokens = Tensor(np.random.default_rng(3).standard_normal((2, 6, 8)))
    _, weights = att.forward(tokens, return_weights=True)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-5)


def _single_head_oracle(att, tokens, source):
    q = tokens @ att.q_proj.w.data + att.q_proj.b.data
    k = source @ att.k_proj.w.data + att.k_proj.b.data
    v = source @ att.v_proj.w.data + att.v_proj.b.data
    scores = q @ k.T / np.sqrt(q.shape[-1])
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    out = w @ v
    return tokens + (out @ att.out_proj.w.data + att.out_proj.b.data)


def test_attention_single_head_matches_oracle():
    att = make_attention(heads=1).eval()
    tokens = np.random.default_rng(4).standard_normal((5, 8))
    expected = _single_head_oracle(att, tokens, tokens)
    got = att(Tensor(tokens[None])).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-5)


def test_attention_two_token_hand_case():
    att = make_attention(heads=1, dim=2, seed=5).eval()
    tokens = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = _single_head_oracle(att, tokens, tokens)
    np.testing.assert_allclose(att(Tensor(tokens[None])).data[0], expected, atol=1e-8)


def test_cross_attention_requires_context():
    att = make_attention(kind="cross", ctx_dim=4).eval()
    tokens = Tensor(np.zeros((1, 3, 8)))
    with pytest.raises(ContractViolation):
        att(tokens)
    out = att(tokens, Tensor(np.random.default_rng(0).standard_normal((1, 2, 4))))
    assert out.shape == (1, 3, 8)


def test_attention_head_mismatch_rejected():
    with pytest.raises(ContractViolation):
        make_attention(dim=9, heads=2)


def make_adaln(dim=6, emb=4, seed=0):
    return nb.AdaLnBlock(dim, emb, np.random.default_rng(seed), dtype=np.float64)


def test_adaln_zero_projection_is_plain_normalization():
    blk = make_adaln()
    tokens = Tensor(np.random.default_rng(1).standard_normal((2, 5, 6)))
    emb = Tensor(np.random.default_rng(2).standard_normal((2, 5, 4)))
    np.testing.assert_allclose(
        blk(tokens, emb).data, T.layer_norm(tokens, axis=-1).data, atol=1e-12)


def test_adaln_gamma_minus_one_zeroes_output():
    blk = make_adaln()
    blk.proj.b.data[: blk.dim] = -1.0  # gamma = -1, beta = 0 for any token
    tokens = Tensor(np.random.default_rng(3).standard_normal((1, 4, 6)))
    emb = Tensor(np.zeros((1, 4, 4)))
    np.testing.assert_allclose(blk(tokens, emb).data, 0.0, atol=1e-12)


def test_adaln_matches_two_step_oracle():
    blk = make_adaln()
    rng = np.random.default_rng(4)
    blk.proj.w.data[:] = rng.standard_normal(blk.proj.w.shape) * 0.3
    blk.proj.b.data[:] = rng.standard_normal(blk.proj.b.shape) * 0.1
    tokens = rng.standard_normal((2, 3, 6))
    emb = rng.standard_normal((2, 3, 4))
    silu = emb * (1.0 / (1.0 + np.exp(-emb)))
    gb = silu @ blk.proj.w.data + blk.proj.b.data
    mu = tokens.mean(-1, keepdims=True)
    var = tokens.var(-1, keepdims=True)
    normed = (tokens - mu) / np.sqrt(var + 1e-5)
    expected = normed * (1.0 + gb[..., :6]) + gb[..., 6:]
    np.testing.assert_allclose(
        blk(Tensor(tokens), Tensor(emb)).data, expected, rtol=1e-8)


@pytest.mark.parametrize("builder", [
    lambda: (make_fc_block(p=0.0).eval(), (5,)),
    lambda: (make_attention().eval(), (4, 8)),
])
def test_blocks_preserve_batch_order(builder):
    block, feature_shape = builder()
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6,) + feature_shape)
    perm = rng.permutation(6)
    out = block(Tensor(x)).data
    out_perm = block(Tensor(x[perm])).data
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)


def test_parameter_counting_and_naming():
    block = make_fc_block(in_dim=3, out_dim=4)
    names = dict(block.named_parameters())
    assert set(names) == {"dense.w", "dense.b", "norm.weight", "norm.bias"}
    assert nb.count_parameters(block) == 3 * 4 + 4 + 4 + 4
    assert nb.count_parameters(nb.Module()) == 0


def test_state_hash_tracks_parameter_changes():
    block = make_fc_block()
    h1 = block.state_hash()
    block.dense.w.data[0, 0] += 1.0
    assert block.state_hash() != h1
