"""Shared oracles: finite-difference gradient checking and an op registry."""

import numpy as np
import pytest

from hrtfproto.numerics import engine as T
from hrtfproto.numerics.engine import GradientTape, Tensor


def finite_difference_check(build, tensors, h=1e-5, rtol=1e-4, max_entries=None):
    """Compare tape gradients of build() against central differences.

    build() must return a scalar loss Tensor recomputed from the tensors'
    current data. Returns the worst relative error seen.
    """
    with GradientTape() as tape:
        loss = build()
    grads = tape.gradients(loss, tensors)
    worst = 0.0
    for t in tensors:
        flat = t.data.ravel()
        gflat = grads[t].data.ravel()
        idx = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.linspace(0, flat.size - 1, max_entries).astype(int)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = float(build().data)
            flat[i] = old - h
            lm = float(build().data)
            flat[i] = old
            fd = (lp - lm) / (2.0 * h)
            an = gflat[i]
            # the 1e-6 floor absorbs central-difference cancellation noise on
            # exactly-zero gradients (e.g. softmax shift invariance)
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
    assert worst < rtol, f"gradient mismatch: worst rel err {worst:.3e} >= {rtol}"
    return worst


def _t(rng, *shape, lo=-2.0, hi=2.0, positive=False, away_from=None, margin=0.05):
    data = rng.uniform(lo, hi, size=shape)
    if positive:
        data = np.abs(data) + 0.5
    if away_from is not None:
        for edge in np.atleast_1d(away_from):
            close = np.abs(data - edge) < margin
            data = np.where(close, data + 2 * margin, data)
    return Tensor(data.astype(np.float64), requires_grad=True)


def operator_registry(rng):
    """name -> (input tensors, callable producing an output Tensor).

    Inputs sized so each operator sees about a hundred probed entries;
    kinked ops (relu, clip) get inputs nudged away from their corners.
    """
    reg = {}
    a = _t(rng, 10, 10)
    b = _t(rng, 10, 10, positive=True)
    reg["add"] = ([a, b], lambda: T.add(a, b))
    reg["sub"] = ([a, b], lambda: T.sub(a, b))
    reg["mul"] = ([a, b], lambda: T.mul(a, b))
    reg["div"] = ([a, b], lambda: T.div(a, b))
    bc1 = _t(rng, 6, 1, 5)
    bc2 = _t(rng, 4, 5)
    reg["add_broadcast"] = ([bc1, bc2], lambda: T.add(bc1, bc2))
    m1 = _t(rng, 6, 4)
    m2 = _t(rng, 4, 5)
    reg["matmul"] = ([m1, m2], lambda: T.matmul(m1, m2))
    bm1 = _t(rng, 3, 4, 2)
    bm2 = _t(rng, 3, 2, 4)
    reg["matmul_batched"] = ([bm1, bm2], lambda: T.matmul(bm1, bm2))
    x = _t(rng, 100)
    reg["exp"] = ([x], lambda: T.exp(x))
    xp = _t(rng, 100, positive=True)
    reg["log"] = ([xp], lambda: T.log(xp))
    reg["sqrt"] = ([xp], lambda: T.sqrt(xp))
    reg["sin"] = ([x], lambda: T.sin(x))
    reg["cos"] = ([x], lambda: T.cos(x))
    reg["tanh"] = ([x], lambda: T.tanh(x))
    reg["sigmoid"] = ([x], lambda: T.sigmoid(x))
    reg["softplus"] = ([x], lambda: T.softplus(x))
    reg["mish"] = ([x], lambda: T.mish(x))
    reg["silu"] = ([x], lambda: T.silu(x))
    xr = _t(rng, 100, away_from=0.0)
    reg["relu"] = ([xr], lambda: T.relu(xr))
    xc = _t(rng, 100, away_from=(-1.0, 1.0))
    reg["clip"] = ([xc], lambda: T.clip(xc, -1.0, 1.0))
    sm = _t(rng, 10, 10)
    reg["softmax"] = ([sm], lambda: T.softmax(sm, axis=-1))
    reg["sum_axis"] = ([a], lambda: T.sum(a, axis=0))
    reg["sum_all"] = ([a], lambda: T.reshape(T.sum(a), (1,)))
    reg["mean_axis"] = ([a], lambda: T.mean(a, axis=1, keepdims=True))
    reg["reshape"] = ([a], lambda: T.reshape(a, (4, 25)))
    tr = _t(rng, 4, 5, 5)
    reg["transpose"] = ([tr], lambda: T.transpose(tr, (2, 0, 1)))
    br = _t(rng, 1, 10)
    reg["broadcast_to"] = ([br], lambda: T.broadcast_to(br, (10, 10)))
    c1 = _t(rng, 5, 6)
    c2 = _t(rng, 5, 6)
    reg["concat"] = ([c1, c2], lambda: T.concat([c1, c2], axis=1))
    reg["slice"] = ([a], lambda: a[2:8, 1:9])
    tk = _t(rng, 10, 10)
    take_idx = rng.integers(0, 10, size=12)
    reg["take"] = ([tk], lambda: T.take(tk, take_idx, axis=0))
    cx = _t(rng, 2, 3, 12)
    cw = _t(rng, 4, 3, 3)
    cb = _t(rng, 4)
    reg["conv1d"] = ([cx, cw, cb], lambda: T.conv1d(cx, cw, cb, stride=1, padding=1))
    reg["conv1d_strided"] = ([cx, cw, cb], lambda: T.conv1d(cx, cw, cb, stride=2, padding=1))
    reg["upsample_linear_2x"] = ([cx], lambda: T.upsample_linear_2x(cx))
    ln = _t(rng, 8, 12)
    lw = _t(rng, 12)
    lb = _t(rng, 12)
    reg["layer_norm"] = ([ln, lw, lb], lambda: T.layer_norm(ln, lw, lb))
    gn = _t(rng, 2, 6, 8)
    gw = _t(rng, 6)
    gb = _t(rng, 6)
    reg["group_norm"] = ([gn, gw, gb], lambda: T.group_norm(gn, 3, gw, gb))
    dr = _t(rng, 10, 10)

    def dropout_fixed_mask():
        return T.dropout(dr, 0.3, rng=np.random.default_rng(123), training=True)

    reg["dropout"] = ([dr], dropout_fixed_mask)
    hf = _t(rng, 7, 2 * 3 + 2)
    hx = _t(rng, 7, 3)
    reg["hyper_affine"] = ([hf, hx], lambda: T.hyper_affine(hf, hx, 2))
    return reg


def loss_through(fn, tensors, weights):
    """Weighted-sum scalar loss so every output entry carries gradient."""
    out = fn()
    return T.sum(T.mul(out, Tensor(weights)))


def check_operator(name, tensors, fn, rng, h=1e-5, rtol=1e-4):
    out_shape = fn().shape
    weights = rng.standard_normal(out_shape)
    return finite_difference_check(
        lambda: loss_through(fn, tensors, weights), tensors, h=h, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
