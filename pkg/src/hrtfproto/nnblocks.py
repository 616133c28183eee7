"""Network building blocks shared by the coder stacks, estimators, and U-Net.

Everything here is built on the numerics tensor engine: blocks hold trainable
Tensors, expose a forward method, and keep no other state besides the
train/eval flag and (for dropout) a bound random generator.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import engine as T
from .numerics.engine import ContractViolation, Tensor


def xavier_uniform(rng, shape, fan_in, fan_out, dtype, gain=1.0):
    a = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(-a, a, size=shape)).astype(dtype)


class Module:
    """Base class with parameter discovery over attributes, lists, tuples."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            yield from _walk(name, value)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self):
        return sum(p.size for p in self.parameters() if p.requires_grad)

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def bind_rng(self, rng):
        """Attach a seeded generator to every dropout layer."""
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng
        return self

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def state_hash(self):
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _walk(name, value):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


class Dense(Module):
    """Affine map y = x @ W + b for (..., in_dim) inputs."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, bias=True,
                 init="xavier", init_scale=1.0):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if init == "zeros":
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype,
                               gain=init_scale)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add(y, self.b)
        return y

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, affine=True, eps=1e-5):
        super().__init__()
        self.eps = eps
        if affine:
            self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
            self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        else:
            self.weight = None
            self.bias = None

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, axis=-1, eps=self.eps)

    __call__ = forward


class GroupNorm(Module):
    def __init__(self, groups, channels, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.group_norm(x, self.groups, self.weight, self.bias, eps=self.eps)

    __call__ = forward


class Dropout(Module):
    def __init__(self, p):
        super().__init__()
        self.p = p
        self.rng = None

    def forward(self, x):
        return T.dropout(x, self.p, rng=self.rng, training=self.training)

    __call__ = forward


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, rng=None,
                 dtype=np.float32, init_scale=1.0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel
        fan_out = out_ch * kernel
        self.w = Tensor(
            xavier_uniform(rng, (out_ch, in_ch, kernel), fan_in, fan_out, dtype,
                           gain=init_scale),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    __call__ = forward


class FourierFeatureMap(Module):
    """Trainable sinusoidal embedding phi(c) = [sin(2*pi*k_1.c), cos(...), ...].

    kappa has one row per frequency; rows are dotted with the conditioning
    vector, which reduces to the scalar case for input_dim == 1. The output
    interleaves sin/cos pairs and has length exactly 2K.
    """

    def __init__(self, num_frequencies, input_dim, rng, dtype=np.float32):
        super().__init__()
        self.num_frequencies = num_frequencies
        self.input_dim = input_dim
        self.kappa = Tensor(
            rng.standard_normal((num_frequencies, input_dim)).astype(dtype),
            requires_grad=True,
        )

    @property
    def output_dim(self):
        return 2 * self.num_frequencies

    def embed(self, c):
        if not isinstance(c, Tensor):
            c = Tensor(np.asarray(c, dtype=self.kappa.dtype))
        if c.shape[-1] != self.input_dim:
            raise ContractViolation(
                f"conditioning dim {c.shape[-1]} != expected {self.input_dim}"
            )
        if not np.all(np.isfinite(c.data)):
            raise ContractViolation("conditioning vector must be finite")
        proj = T.matmul(c, T.transpose(self.kappa))  # (..., K)
        ang = T.mul(proj, 2.0 * math.pi)
        s = T.sin(ang)
        co = T.cos(ang)
        k = self.num_frequencies
        lead = s.shape[:-1]
        pair = T.concat(
            [T.reshape(s, lead + (k, 1)), T.reshape(co, lead + (k, 1))], axis=-1
        )
        return T.reshape(pair, lead + (2 * k,))

    __call__ = embed


def ffm_embed(ffm: FourierFeatureMap, c):
    return ffm.embed(c)


class WeightGenerator(Module):
    """Maps a conditioning vector to a flat weight+bias vector.

    Shares a FourierFeatureMap with sibling generators of the same coder and
    owns its own dense tail: fc_a -> layer norm -> Mish -> fc_b.
    """

    def __init__(self, ffm, hidden, out_len, rng, dtype=np.float32):
        super().__init__()
        self.ffm = ffm
        self.out_len = out_len
        self.fc_a = Dense(ffm.output_dim, hidden, rng, dtype=dtype)
        self.norm = LayerNorm(hidden, dtype=dtype)
        self.fc_b = Dense(hidden, out_len, rng, dtype=dtype)

    def named_parameters(self, prefix=""):
        # the shared ffm is reported by the owning coder, not per generator
        for attr in ("fc_a", "norm", "fc_b"):
            yield from _walk(f"{prefix}{attr}", getattr(self, attr))

    def forward(self, c):
        h = self.fc_a(self.ffm.embed(c))
        h = T.mish(self.norm(h))
        return self.fc_b(h)

    __call__ = forward


class HyperlinearLayer(Module):
    """Linear layer whose weights/bias are generated from conditioning."""

    def __init__(self, in_dim, out_dim, ffm, gen_hidden, rng, dtype=np.float32):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.generator = WeightGenerator(
            ffm, gen_hidden, out_dim * in_dim + out_dim, rng, dtype=dtype
        )

    def generate(self, c):
        """Return (W, b) of shapes (..., out, in) and (..., out)."""
        flat = self.generator(c)
        lead = flat.shape[:-1]
        oi = self.out_dim * self.in_dim
        w = T.reshape(flat[..., :oi], lead + (self.out_dim, self.in_dim))
        b = flat[..., oi:]
        return w, b

    def forward(self, c, x):
        """x: (N, in_dim) tokens with conditioning rows c (N, cond_dim)."""
        flat = self.generator(c)
        return T.hyper_affine(flat, x, self.out_dim)

    __call__ = forward


def hyper_generate(layer: HyperlinearLayer, c):
    return layer.generate(c)


def hyperlinear_apply(layer: HyperlinearLayer, c, x):
    return layer.forward(c, x)


class FcBlock(Module):
    """dense -> layer norm -> ReLU -> dropout, in that order."""

    def __init__(self, in_dim, out_dim, dropout, rng, dtype=np.float32):
        super().__init__()
        self.dense = Dense(in_dim, out_dim, rng, dtype=dtype)
        self.norm = LayerNorm(out_dim, dtype=dtype)
        self.drop = Dropout(dropout)

    def forward(self, x):
        return self.drop(T.relu(self.norm(self.dense(x))))

    __call__ = forward


def fc_block_forward(block: FcBlock, x):
    return block.forward(x)


class AttentionBlock(Module):
    """Residual multi-head attention, self or cross flavored.

    tokens: (N, S, model_dim); cross attention takes context (N, Tc, ctx_dim).
    Output adds the input tokens (residual).
    """

    def __init__(self, kind, model_dim, heads=8, ctx_dim=None, dropout=0.0,
                 rng=None, dtype=np.float32):
        super().__init__()
        if kind not in ("self", "cross"):
            raise ContractViolation(f"unknown attention kind {kind!r}")
        if model_dim % heads:
            raise ContractViolation(
                f"model_dim {model_dim} not divisible by heads {heads}"
            )
        self.kind = kind
        self.heads = heads
        self.model_dim = model_dim
        kv_dim = ctx_dim if kind == "cross" else model_dim
        self.q_proj = Dense(model_dim, model_dim, rng, dtype=dtype)
        self.k_proj = Dense(kv_dim, model_dim, rng, dtype=dtype)
        self.v_proj = Dense(kv_dim, model_dim, rng, dtype=dtype)
        self.out_proj = Dense(model_dim, model_dim, rng, dtype=dtype)
        self.drop = Dropout(dropout)

    def _split(self, x):
        n, s, _ = x.shape
        dh = self.model_dim // self.heads
        return T.transpose(T.reshape(x, (n, s, self.heads, dh)), (0, 2, 1, 3))

    def forward(self, tokens, context=None, return_weights=False):
        if self.kind == "cross":
            if context is None:
                raise ContractViolation("cross attention requires a context")
            source = context
        else:
            source = tokens
        n, s, d = tokens.shape
        dh = self.model_dim // self.heads
        q = self._split(self.q_proj(tokens))
        k = self._split(self.k_proj(source))
        v = self._split(self.v_proj(source))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(weights, v)  # (N, h, S, dh)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, s, d))
        out = T.add(tokens, self.drop(self.out_proj(merged)))
        if return_weights:
            return out, weights
        return out

    __call__ = forward


def attention_forward(blk: AttentionBlock, tokens, context=None):
    return blk.forward(tokens, context)


class AdaLnBlock(Module):
    """Layer norm without learned affine, modulated per token by an embedding.

    output = normalize(tokens) * (1 + gamma) + beta with (gamma, beta)
    projected from the embedding; the projection starts at zero so an
    untrained block is plain normalization.
    """

    def __init__(self, dim, emb_dim, rng=None, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.proj = Dense(emb_dim, 2 * dim, rng, dtype=dtype, init="zeros")

    def forward(self, tokens, emb):
        h = T.layer_norm(tokens, axis=-1)
        gb = self.proj(T.silu(emb))
        gamma = gb[..., : self.dim]
        beta = gb[..., self.dim :]
        return T.add(T.mul(h, T.add(gamma, 1.0)), beta)

    __call__ = forward


def adaln_forward(blk: AdaLnBlock, tokens, emb):
    return blk.forward(tokens, emb)


def count_parameters(net) -> int:
    """Number of trainable scalars, layer-norm affines and FFM kappa included."""
    if isinstance(net, Module):
        return net.parameter_count()
    return sum(p.size for p in net if p.requires_grad)
