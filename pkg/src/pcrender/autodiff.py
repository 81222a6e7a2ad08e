"""Dense float64 tensors with recorded-tape reverse-mode differentiation.

Every operation here computes its forward value with numpy and, when a Tape
is active and an input requires gradients, appends a node holding the inputs,
the output and a backward rule. ``backward`` replays the tape in reverse and
accumulates gradients into every tensor that requires them. Nothing is ever
recomputed or re-ordered, so identical inputs give bitwise-identical values
and gradients on the same machine.

Conventions baked in and relied on by callers:

* all data is float64; write float32 only at serialization boundaries,
* relu's derivative at exactly 0 is 0,
* instance_norm uses population variance over the spatial plane,
* downsample2 is 2x2 average pooling, upsample2 is nearest-neighbor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError

_ACTIVE_TAPE = None


class Tensor:
    """A dense row-major float64 array, optionally tracked on a tape.

    ``grad`` is populated by :func:`backward` and matches ``data`` in shape.
    ``node_id`` is the index of the producing node on ``tape`` for non-leaf
    tensors; leaves keep it None.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Append-only record of operations, usable as a context manager.

    While the tape is entered, every op whose inputs require gradients
    records a node. Node order is the execution order, which is a valid
    topological order for the reverse sweep.
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)


def _emit(out_data, inputs, vjp, op):
    """Wrap ``out_data`` in a Tensor, recording a node if needed."""
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        out.tape = tape
        tape.nodes.append(_Node(op, tuple(inputs), out, vjp))
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked tensor.

    ``loss`` must be a scalar produced on ``tape``. Gradients add across
    fan-out; call ``zero_grad`` on parameters between steps.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("backward expects a scalar loss tensor")
    if loss.tape is not tape or loss.node_id is None:
        raise UsageError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gi


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _require_same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    _require_same_shape(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c):
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0.0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def concat(a, b, axis=-1):
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: ranks {a.data.ndim} and {b.data.ndim} differ")
    ax = axis % a.data.ndim
    for d in range(a.data.ndim):
        if d != ax and a.data.shape[d] != b.data.shape[d]:
            raise ShapeError(
                f"concat: shapes {a.data.shape} and {b.data.shape} differ off axis {ax}"
            )
    split = a.data.shape[ax]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=ax)
        return np.ascontiguousarray(ga), np.ascontiguousarray(gb)

    return _emit(np.concatenate([a.data, b.data], axis=ax), (a, b), vjp, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def linear(x, w, b):
    """x[B,I] @ w[I,O] + b[O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"linear: expected 2D x, 2D w, 1D b, got {x.data.shape}, "
            f"{w.data.shape}, {b.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"linear: inner dims disagree for x{x.data.shape} w{w.data.shape} "
            f"b{b.data.shape}"
        )

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit(x.data @ w.data + b.data, (x, w, b), vjp, "linear")


def _im2col(xp, K, stride, Ho, Wo):
    # xp: padded (C, Hp, Wp); result (C*K*K, Ho*Wo), always a fresh copy
    C = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (C, K, K, Ho, Wo), (s0, s1, s2, s1 * stride, s2 * stride)
    )
    return np.ascontiguousarray(view).reshape(C * K * K, Ho * Wo)


def conv2d(x, k, b, stride=1, padding=0):
    """Cross-correlation of x[Cin,H,W] with k[Cout,Cin,K,K] plus bias b[Cout].

    Zero padding, odd square kernels only. Output extents follow
    floor((H + 2*padding - K)/stride) + 1.
    """
    if x.data.ndim != 3 or k.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError(
            f"conv2d: expected 3D x, 4D k, 1D b, got {x.data.shape}, "
            f"{k.data.shape}, {b.data.shape}"
        )
    Cin, H, W = x.data.shape
    Cout, Ck, Kh, Kw = k.data.shape
    if Ck != Cin:
        raise ShapeError(f"conv2d: x has {Cin} channels but kernel expects {Ck}")
    if Kh != Kw or Kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {Kh}x{Kw}")
    if b.data.shape[0] != Cout:
        raise ShapeError(f"conv2d: bias {b.data.shape} does not match {Cout} outputs")
    K = Kh
    Ho = (H + 2 * padding - K) // stride + 1
    Wo = (W + 2 * padding - K) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(
            f"conv2d: non-positive output extent {Ho}x{Wo} for input {H}x{W}, "
            f"kernel {K}, stride {stride}, padding {padding}"
        )

    if padding:
        xp = np.zeros((Cin, H + 2 * padding, W + 2 * padding), dtype=np.float64)
        xp[:, padding : padding + H, padding : padding + W] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, K, stride, Ho, Wo)
    kmat = k.data.reshape(Cout, Cin * K * K)
    out = (kmat @ cols + b.data[:, None]).reshape(Cout, Ho, Wo)

    def vjp(g):
        gmat = g.reshape(Cout, Ho * Wo)
        dk = (gmat @ cols.T).reshape(k.data.shape)
        db = gmat.sum(axis=1)
        dcols = (kmat.T @ gmat).reshape(Cin, K, K, Ho, Wo)
        dxp = np.zeros((Cin, H + 2 * padding, W + 2 * padding), dtype=np.float64)
        for ki in range(K):
            hi = ki + stride * Ho
            for kj in range(K):
                wj = kj + stride * Wo
                dxp[:, ki:hi:stride, kj:wj:stride] += dcols[:, ki, kj]
        if padding:
            dx = dxp[:, padding : padding + H, padding : padding + W]
        else:
            dx = dxp
        return np.ascontiguousarray(dx), dk, db

    return _emit(out, (x, k, b), vjp, "conv2d")


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-channel normalization of x[C,H,W] over its spatial plane."""
    if x.data.ndim != 3:
        raise ShapeError(f"instance_norm: expected C,H,W input, got {x.data.shape}")
    C = x.data.shape[0]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(
            f"instance_norm: gamma {gamma.data.shape} / beta {beta.data.shape} "
            f"do not match {C} channels"
        )
    mean = x.data.mean(axis=(1, 2), keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        dxhat = g * gamma.data[:, None, None]
        m1 = dxhat.mean(axis=(1, 2), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(1, 2), keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _emit(out, (x, gamma, beta), vjp, "instance_norm")


# ---------------------------------------------------------------------------
# resampling


def downsample2(x):
    """2x2 average pooling of x[C,H,W]; H and W must be even."""
    C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"downsample2: extents {H}x{W} are not even")
    out = x.data.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _emit(out, (x,), vjp, "downsample2")


def upsample2(x):
    """Nearest-neighbor 2x upsampling of x[C,H,W]."""
    C, H, W = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)),)

    return _emit(out, (x,), vjp, "upsample2")


def pad_reflect2d(x, top, bottom, left, right):
    """Reflect-pad the spatial extents of x[C,H,W] (no edge repetition)."""
    C, H, W = x.data.shape
    if top >= H or bottom >= H or left >= W or right >= W:
        raise UsageError(
            f"pad_reflect2d: pads ({top},{bottom},{left},{right}) too large "
            f"for {H}x{W}"
        )
    ih = np.pad(np.arange(H), (top, bottom), mode="reflect")
    iw = np.pad(np.arange(W), (left, right), mode="reflect")
    out = x.data[:, ih[:, None], iw[None, :]]

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), ih[:, None], iw[None, :]), g)
        return (dx,)

    return _emit(out, (x,), vjp, "pad_reflect2d")


def crop2d(x, top, left, h, w):
    """Spatial crop of x[C,H,W] to h x w starting at (top, left)."""
    C, H, W = x.data.shape
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise UsageError(f"crop2d: window ({top},{left},{h},{w}) outside {H}x{W}")
    out = x.data[:, top : top + h, left : left + w]

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[:, top : top + h, left : left + w] = g
        return (dx,)

    return _emit(np.ascontiguousarray(out), (x,), vjp, "crop2d")


# ---------------------------------------------------------------------------
# shape plumbing


def permute(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), vjp, "permute")


def reshape(x, shape):
    old = x.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _emit(x.data.reshape(shape), (x,), vjp, "reshape")


def scatter_rows(rows, ids, size):
    """Place rows[N,C] at positions ids into a zero matrix of shape [size,C].

    ids must be unique and in range; the gradient gathers back to the rows.
    """
    ids = np.asarray(ids)
    if rows.data.ndim != 2 or ids.ndim != 1 or ids.shape[0] != rows.data.shape[0]:
        raise ShapeError(
            f"scatter_rows: rows {rows.data.shape} vs ids {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise UsageError(f"scatter_rows: ids outside [0, {size})")
    if np.unique(ids).size != ids.size:
        raise UsageError("scatter_rows: duplicate ids")
    out = np.zeros((size, rows.data.shape[1]), dtype=np.float64)
    out[ids] = rows.data

    def vjp(g):
        return (np.ascontiguousarray(g[ids]),)

    return _emit(out, (rows,), vjp, "scatter_rows")


# ---------------------------------------------------------------------------
# reductions


def mse(pred, target):
    """Mean squared difference over all elements, as a scalar tensor."""
    _require_same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def vjp(g):
        d = g * (2.0 / n) * diff
        return d, -d

    return _emit(out, (pred, target), vjp, "mse")


def weighted_sum(x, weights):
    """sum(x * weights) with constant weights, as a scalar tensor."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.data.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs x {x.data.shape}")
    out = np.asarray((x.data * weights).sum())

    def vjp(g):
        return (g * weights,)

    return _emit(out, (x,), vjp, "weighted_sum")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-group Adam moments. Lazily sized on the first step."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr):
    """One Adam update with bias correction; step_count increments first."""
    if lr <= 0:
        raise UsageError(f"adam_step: lr must be positive, got {lr}")
    if len(params) != len(grads):
        raise UsageError("adam_step: params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def uniform_init(rng, shape, fan_in, gain=1.0):
    """Weight init: uniform in +-gain*sqrt(1/fan_in).

    gain=1 matches the common framework default; gain=sqrt(6) preserves
    activation variance through relu layers (He-uniform), which deep stacks
    need to keep their outputs from collapsing toward a constant.
    """
    bound = gain * math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
