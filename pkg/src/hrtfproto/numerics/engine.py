"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable operation records an entry on the innermost active
:class:`GradientTape`. Execution order is a topological order of the data
flow, so replaying the entries in reverse visits each operation exactly once
after all of its consumers. Tensors are row-major float32 or float64 arrays;
training runs in 32-bit while gradient checks construct 64-bit graphs.
"""

from __future__ import annotations

import numpy as np


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class NumericError(ArithmeticError):
    """A non-finite value surfaced where the contract requires finite math."""


_TAPE_STACK: list["GradientTape | None"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context manager that suspends recording (frozen-weight inference)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class Tensor:
    """N-dimensional real array, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "name", "_tape")

    # keep numpy from consuming Tensors in mixed expressions; the reflected
    # operator then routes through the recorded primitives
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        head = f"Tensor(shape={self.shape}, dtype={self.dtype.name}"
        if self.requires_grad:
            head += ", requires_grad=True"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    # arithmetic sugar; all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad=False, dtype=None, name=None):
    """Build a Tensor; python scalars and lists become float32 by default."""
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=requires_grad, name=name)


class _Entry:
    __slots__ = ("name", "out", "ins", "backward")

    def __init__(self, name, out, ins, backward):
        self.name = name
        self.out = out
        self.ins = ins
        self.backward = backward


class GradientTape:
    """Ordered record of executed differentiable operations.

    Entering pushes the tape onto the recording stack; gradients() consumes
    the record. check_finite adds a per-operation NaN/Inf guard on the
    backward pass (off by default, it costs a reduction per entry).
    """

    def __init__(self, check_finite=False):
        self._entries: list[_Entry] = []
        self._consumed = False
        self.check_finite = check_finite

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def _record(self, name, out, ins, backward):
        if self._consumed:
            raise ContractViolation("gradient tape already consumed")
        out._tape = self
        self._entries.append(_Entry(name, out, ins, backward))

    def gradients(self, loss: Tensor, params) -> dict[Tensor, Tensor]:
        """Return d loss / d p for every p in params; consumes the tape."""
        if self._consumed:
            raise ContractViolation("gradient tape already consumed")
        if loss.data.size != 1:
            raise ContractViolation(
                f"loss must be scalar, got shape {loss.shape}"
            )
        if not np.isfinite(loss.data):
            raise NumericError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            gout = grads.pop(id(entry.out), None)
            if gout is None:
                continue
            parts = entry.backward(gout)
            for t, part in zip(entry.ins, parts):
                if part is None:
                    continue
                if self.check_finite and not np.all(np.isfinite(part)):
                    raise NumericError(
                        f"non-finite gradient produced by op '{entry.name}'"
                    )
                acc = grads.get(id(t))
                grads[id(t)] = part if acc is None else acc + part
        self._entries.clear()
        self._consumed = True
        out: dict[Tensor, Tensor] = {}
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            out[p] = Tensor(np.asarray(g, dtype=p.dtype))
        return out


def backward_gradients(loss: Tensor, params) -> dict[Tensor, Tensor]:
    """Gradients of a recorded scalar loss w.r.t. params; consumes the tape."""
    if loss._tape is None:
        raise ContractViolation("loss was not recorded on a gradient tape")
    return loss._tape.gradients(loss, params)


# ---------------------------------------------------------------------------
# recording plumbing


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _tracked(t: Tensor, tape) -> bool:
    return t.requires_grad or t._tape is tape


def _emit(name, out_data, ins, backward):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in ins):
        tape._record(name, out, ins, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over the axes numpy broadcast to reach g.shape from shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# broadcasting binary arithmetic


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _emit(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    """numpy matmul semantics for operands of ndim >= 2, batch-broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul operands must have ndim >= 2")

    def backward(g):
        # constants (e.g. interpolation matrices) skip their half of the work
        ga = gb = None
        if a.requires_grad or a._tape is not None:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad or b._tape is not None:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise functions


def exp(x):
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x):
    x = _as_tensor(x)
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = _as_tensor(x)
    y = np.sqrt(x.data)
    return _emit("sqrt", y, (x,), lambda g: (g * (0.5 / y),))


def sin(x):
    x = _as_tensor(x)
    return _emit("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    x = _as_tensor(x)
    return _emit("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-x.data))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def _softplus_np(x):
    # stable: max(x, 0) + log1p(exp(-|x|)); much faster than logaddexp
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softplus(x):
    x = _as_tensor(x)
    y = _softplus_np(x.data)
    return _emit("softplus", y, (x,), lambda g: (g * _sigmoid_np(x.data),))


def relu(x):
    x = _as_tensor(x)
    return _emit(
        "relu",
        np.maximum(x.data, 0.0),
        (x,),
        lambda g: (g * (x.data > 0.0),),
    )


def clip(x, lo, hi):
    """Elementwise clamp; gradient passes only strictly inside (lo, hi)."""
    x = _as_tensor(x)
    return _emit(
        "clip",
        np.clip(x.data, lo, hi),
        (x,),
        lambda g: (g * ((x.data > lo) & (x.data < hi)),),
    )


def mish(x):
    """x * tanh(softplus(x)), fused forward and backward."""
    x = _as_tensor(x)
    t = np.tanh(_softplus_np(x.data))
    y = x.data * t

    def backward(g):
        s = _sigmoid_np(x.data)
        return (g * (t + x.data * s * (1.0 - t * t)),)

    return _emit("mish", y, (x,), backward)


def silu(x):
    """x * sigmoid(x), fused forward and backward."""
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)
    y = x.data * s

    def backward(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _emit("silu", y, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", y, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    y = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(y.size, 1)

    def backward(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("mean", y, (x,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    return _emit(
        "reshape",
        x.data.reshape(shape),
        (x,),
        lambda g: (g.reshape(x.shape),),
    )


def transpose(x, axes=None):
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _emit(
        "transpose",
        x.data.transpose(axes),
        (x,),
        lambda g: (g.transpose(inv),),
    )


def broadcast_to(x, shape):
    x = _as_tensor(x)
    return _emit(
        "broadcast_to",
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, x.shape),),
    )


def concat(tensors, axis=0):
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def _is_advanced_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, idx):
    """Basic slicing / integer indexing; gradient scatters back."""
    x = _as_tensor(x)
    y = x.data[idx]
    advanced = _is_advanced_index(idx)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        if advanced:
            np.add.at(gx, idx, g)  # repeated indices must accumulate
        else:
            gx[idx] += g
        return (gx,)

    return _emit("slice", y.copy() if isinstance(y, np.ndarray) else y, (x,), backward)


def take(x, indices, axis=0):
    """Gather rows along an axis; backward scatter-adds repeated rows."""
    x = _as_tensor(x)
    indices = np.asarray(indices)
    y = np.take(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        sl = [slice(None)] * x.ndim
        sl[axis] = indices
        np.add.at(gx, tuple(sl), g)
        return (gx,)

    return _emit("take", y, (x,), backward)


def stop_gradient(x):
    """Block gradient flow; returns an untracked tensor sharing the data."""
    x = _as_tensor(x)
    return Tensor(x.data)


def hyper_affine(flat, x, out_dim):
    """Per-row affine map from a generated flat weight vector.

    flat (N, out_dim*in_dim + out_dim) holds W row-major then b per token;
    x is (N, in_dim). Fused so the backward assembles the flat gradient
    directly instead of scattering into a zero buffer.
    """
    flat = _as_tensor(flat)
    x = _as_tensor(x)
    n, in_dim = x.shape
    oi = out_dim * in_dim
    if flat.shape != (n, oi + out_dim):
        raise ContractViolation(
            f"flat shape {flat.shape} != ({n}, {oi + out_dim}) for "
            f"out={out_dim}, in={in_dim}"
        )
    w = flat.data[:, :oi].reshape(n, out_dim, in_dim)
    y = (w @ x.data[:, :, None])[:, :, 0] + flat.data[:, oi:]

    def backward(g):
        gflat = np.empty_like(flat.data)
        gw = g[:, :, None] @ x.data[:, None, :]
        gflat[:, :oi] = gw.reshape(n, oi)
        gflat[:, oi:] = g
        gx = (np.swapaxes(w, 1, 2) @ g[:, :, None])[:, :, 0]
        return gflat, gx

    return _emit("hyper_affine", y, (flat, x), backward)


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax", y, (x,), backward)


def dropout(x, p, rng=None, training=True):
    """Inverted dropout: scales by 1/(1-p) at train time, identity in eval."""
    if not training or p == 0.0:
        return _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ContractViolation("train-mode dropout requires a seeded generator")
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    return _emit(
        "dropout",
        x.data * keep * scale,
        (x,),
        lambda g: (g * keep * scale,),
    )


def conv1d(x, w, b=None, stride=1, padding=0):
    """1D convolution (cross-correlation), x (N, Cin, L), w (Cout, Cin, k)."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    n, cin, length = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ContractViolation(
            f"conv1d channel mismatch: input {cin} vs kernel {cin_w}"
        )
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding)))
    lout = (length + 2 * padding - k) // stride + 1
    if lout <= 0:
        raise ContractViolation("conv1d output length would be non-positive")
    # im2col: (N, Lout, Cin*k) against (Cout, Cin*k)
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    windows = windows[:, :, ::stride, :]  # (N, Cin, Lout, k)
    cols = windows.transpose(0, 2, 1, 3).reshape(n, lout, cin * k)
    w2 = w.data.reshape(cout, cin * k)
    out = cols @ w2.T  # (N, Lout, Cout)
    out = out.transpose(0, 2, 1)
    ins = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data[None, :, None]
        ins.append(b)

    def backward(g):
        # g: (N, Cout, Lout)
        gl = g.transpose(0, 2, 1)  # (N, Lout, Cout)
        gw = np.einsum("nlo,nlf->of", gl, cols).reshape(w.shape)
        gcols = gl @ w2  # (N, Lout, Cin*k)
        gwin = gcols.reshape(n, lout, cin, k).transpose(0, 2, 1, 3)
        gxp = np.zeros((n, cin, length + 2 * padding), dtype=x.dtype)
        for j in range(k):
            gxp[:, :, j : j + stride * lout : stride] += gwin[:, :, :, j]
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        parts = [gx, gw]
        if b is not None:
            parts.append(g.sum(axis=(0, 2)))
        return tuple(parts)

    return _emit("conv1d", out, tuple(ins), backward)


def _upsample_matrix(length, dtype):
    """(length, 2*length) linear ×2 interpolation, edge-clamped."""
    out_len = 2 * length
    m = np.zeros((length, out_len), dtype=dtype)
    for i in range(out_len):
        src = i / 2.0 - 0.25
        j0 = int(np.floor(src))
        frac = src - j0
        j0c = min(max(j0, 0), length - 1)
        j1c = min(max(j0 + 1, 0), length - 1)
        m[j0c, i] += 1.0 - frac
        m[j1c, i] += frac
    return m


_UPSAMPLE_CACHE: dict[tuple[int, str], np.ndarray] = {}


def upsample_linear_2x(x):
    """Linear interpolation along the last axis, fixed factor 2."""
    x = _as_tensor(x)
    length = x.shape[-1]
    key = (length, x.dtype.name)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = _upsample_matrix(length, x.dtype)
        _UPSAMPLE_CACHE[key] = m
    return matmul(x, Tensor(m))


# ---------------------------------------------------------------------------
# normalization composites


def layer_norm(x, weight=None, bias=None, axis=-1, eps=1e-5):
    """Normalize along `axis`, then optional per-feature affine."""
    mu = mean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=axis, keepdims=True)
    y = div(xc, sqrt(add(var, eps)))
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def group_norm(x, groups, weight=None, bias=None, eps=1e-5):
    """Normalize (N, C, L) inputs per group of channels, affine per channel."""
    x = _as_tensor(x)
    n, c, length = x.shape
    if c % groups:
        raise ContractViolation(f"channels {c} not divisible by groups {groups}")
    xg = reshape(x, (n, groups, (c // groups) * length))
    yg = layer_norm(xg, axis=-1, eps=eps)
    y = reshape(yg, (n, c, length))
    if weight is not None:
        y = mul(y, reshape(weight, (1, c, 1)))
    if bias is not None:
        y = add(y, reshape(bias, (1, c, 1)))
    return y
