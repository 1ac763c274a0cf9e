"""Differentiable compute kernels on a reverse-mode tape.

Every kernel computes its forward value, adds its forward cost to the
tape's FLOP tally, and records a closure that propagates gradients to its
inputs. The tape replays closures in exact reverse execution order.
Finite differences (``grad_check``) are the correctness oracle; run it in
64-bit mode.

FLOP convention (shared with the analytic cost model): one
multiply-accumulate counts 2, elementwise add/sub/mul/div/sqrt count 1,
exp/tanh/sigmoid count 1 per element, comparisons and gathers count 0.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import DataError

# ---------------------------------------------------------------------------
# FLOP cost rules, used both by the runtime tally and the analytic model


def flops_matmul(n, k, m):
    return 2 * n * k * m


def flops_linear(n, d_in, d_out):
    return 2 * n * d_in * d_out + n * d_out  # matmul + bias add


def flops_elementwise(size, ops_per_element=1):
    return size * ops_per_element


def flops_softmax(rows, cols):
    # subtract max, exp, sum, divide per row
    return rows * (4 * cols - 1)


def flops_layer_norm(rows, cols):
    # mean, center, variance, eps/sqrt, normalize, gain, bias
    return rows * (7 * cols + 2)


def flops_attention(n_q, n_k, d_k, d_v):
    scores = flops_matmul(n_q, d_k, n_k) + n_q * n_k  # QK^T and scaling
    return scores + flops_softmax(n_q, n_k) + flops_matmul(n_q, n_k, d_v)


def flops_lstm_step(d_h):
    # h @ W_h, add into the precomputed input projection, gates, state update
    return 8 * d_h * d_h + 13 * d_h


def flops_cross_entropy(classes):
    return 4 * classes + 1


def flops_mean_pool(rows_in, rows_out, cols):
    # sums within windows plus one divide per output element
    return (rows_in - rows_out) * cols + rows_out * cols


GELU_FLOPS_PER_ELEMENT = 8

_GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# tape


class Node:
    """A value in the computation graph with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = None


def _acc(node, g):
    node.grad = g if node.grad is None else node.grad + g


class Tape:
    """Ordered record of kernel applications plus a forward FLOP tally."""

    def __init__(self):
        self._ops = []
        self.flops = 0

    def record(self, value, backward) -> Node:
        node = Node(value)
        self._ops.append((node, backward))
        return node

    def add_flops(self, n):
        self.flops += int(n)

    def backward(self, loss: Node, seed=1.0):
        loss.grad = np.full_like(loss.value, seed)
        for node, back in reversed(self._ops):
            if node.grad is not None:
                back(node.grad)


def constant(value) -> Node:
    """A leaf node; gradients accumulate on it but do not propagate further."""
    return Node(value)


# ---------------------------------------------------------------------------
# kernels


def add(tape, a, b):
    if a.value.shape != b.value.shape:
        raise DataError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
    tape.add_flops(flops_elementwise(a.value.size))

    def back(g):
        _acc(a, g)
        _acc(b, g)

    return tape.record(a.value + b.value, back)


def mul(tape, a, b):
    if a.value.shape != b.value.shape:
        raise DataError(f"mul: shape mismatch {a.value.shape} vs {b.value.shape}")
    tape.add_flops(flops_elementwise(a.value.size))

    def back(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    return tape.record(a.value * b.value, back)


def scale(tape, x, c):
    tape.add_flops(flops_elementwise(x.value.size))

    def back(g):
        _acc(x, g * c)

    return tape.record(x.value * c, back)


def matmul(tape, a, b):
    if a.value.shape[1] != b.value.shape[0]:
        raise DataError(f"matmul: shape mismatch {a.value.shape} vs {b.value.shape}")
    tape.add_flops(flops_matmul(a.value.shape[0], a.value.shape[1], b.value.shape[1]))

    def back(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return tape.record(a.value @ b.value, back)


def linear(tape, x, w, b=None):
    """y = x @ w + b for x of shape (n, d_in)."""
    if x.value.shape[1] != w.value.shape[0]:
        raise DataError(f"linear: shape mismatch {x.value.shape} vs {w.value.shape}")
    n, d_out = x.value.shape[0], w.value.shape[1]
    y = x.value @ w.value
    if b is not None:
        if b.value.shape != (d_out,):
            raise DataError(f"linear: bias shape {b.value.shape} != ({d_out},)")
        y = y + b.value
        tape.add_flops(flops_linear(n, x.value.shape[1], d_out))
    else:
        tape.add_flops(flops_matmul(n, x.value.shape[1], d_out))

    def back(g):
        _acc(x, g @ w.value.T)
        _acc(w, x.value.T @ g)
        if b is not None:
            _acc(b, g.sum(axis=0))

    return tape.record(y, back)


def tanh(tape, x):
    tape.add_flops(flops_elementwise(x.value.size))
    y = np.tanh(x.value)

    def back(g):
        _acc(x, g * (1 - y * y))

    return tape.record(y, back)


def sigmoid(tape, x):
    tape.add_flops(flops_elementwise(x.value.size))
    y = 1.0 / (1.0 + np.exp(-x.value))

    def back(g):
        _acc(x, g * y * (1 - y))

    return tape.record(y, back)


def gelu(tape, x):
    """Gaussian error linear unit, smooth tanh form."""
    tape.add_flops(flops_elementwise(x.value.size, GELU_FLOPS_PER_ELEMENT))
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1 + t)

    def back(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * v * v)
        _acc(x, g * (0.5 * (1 + t) + 0.5 * v * (1 - t * t) * dinner))

    return tape.record(y, back)


def softmax(tape, x):
    """Row-wise softmax with max-subtraction; rows must be finite."""
    v = x.value
    if not np.isfinite(v).all():
        raise DataError("softmax: non-finite input")
    tape.add_flops(flops_softmax(v.shape[0], v.shape[1]))
    y = _softmax_rows(v)

    def back(g):
        _acc(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return tape.record(y, back)


def _softmax_rows(v):
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(tape, x, gain, bias, eps=1e-5):
    """Per-row standardization followed by an affine map."""
    v = x.value
    n, d = v.shape
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise DataError("layer_norm: gain/bias width mismatch")
    tape.add_flops(flops_layer_norm(n, d))
    mu = v.mean(axis=1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    y = xhat * gain.value + bias.value

    def back(g):
        dxhat = g * gain.value
        _acc(gain, (g * xhat).sum(axis=0))
        _acc(bias, g.sum(axis=0))
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        _acc(x, inv * (dxhat - m1 - xhat * m2))

    return tape.record(y, back)


def scaled_dot_attention(tape, q, k, v, mask=None):
    """softmax(Q K^T / sqrt(d_k)) V with optional boolean mask (True = keep).

    Rejects queries whose keys are all masked rather than zeroing them.
    """
    n_q, d_k = q.value.shape
    n_k, d_v = k.value.shape[0], v.value.shape[1]
    if k.value.shape[1] != d_k or v.value.shape[0] != n_k:
        raise DataError("attention: Q/K/V shapes do not conform")
    tape.add_flops(flops_attention(n_q, n_k, d_k, d_v))
    inv_sqrt = 1.0 / math.sqrt(d_k)
    scores = (q.value @ k.value.T) * inv_sqrt
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n_q, n_k):
            raise DataError(f"attention: mask shape {mask.shape} != ({n_q}, {n_k})")
        if not mask.any(axis=1).all():
            raise DataError("attention: some query has all keys masked")
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    a = e / e.sum(axis=1, keepdims=True)
    out = a @ v.value

    def back(g):
        _acc(v, a.T @ g)
        da = g @ v.value.T
        ds = a * (da - (da * a).sum(axis=1, keepdims=True))
        _acc(q, (ds @ k.value) * inv_sqrt)
        _acc(k, (ds.T @ q.value) * inv_sqrt)

    return tape.record(out, back)


def multi_head_attention(tape, x_q, x_kv, heads, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, mask=None):
    """Head-split attention with input and output projections.

    All projections map to the model width d = w_q.shape[1]; d must be
    divisible by ``heads``.
    """
    d = w_q.value.shape[1]
    if d % heads != 0:
        raise DataError(f"attention width {d} not divisible by {heads} heads")
    q = linear(tape, x_q, w_q, b_q)
    k = linear(tape, x_kv, w_k, b_k)
    v = linear(tape, x_kv, w_v, b_v)
    dh = d // heads
    outs = []
    for h in range(heads):
        qs = slice_cols(tape, q, h * dh, (h + 1) * dh)
        ks = slice_cols(tape, k, h * dh, (h + 1) * dh)
        vs = slice_cols(tape, v, h * dh, (h + 1) * dh)
        outs.append(scaled_dot_attention(tape, qs, ks, vs, mask=mask))
    merged = concat_cols(tape, outs) if heads > 1 else outs[0]
    return linear(tape, merged, w_o, b_o)


def lstm_core(tape, zx_t, h_prev, c_prev, w_h):
    """One LSTM step given the precomputed input projection zx_t = x W_x + b.

    Returns a (1, 2H) node holding [h_t | c_t]; slice to use the halves.
    Gate order in the 4H projection: input, forget, cell, output.
    """
    d_h = h_prev.value.shape[1]
    if zx_t.value.shape[1] != 4 * d_h or w_h.value.shape != (d_h, 4 * d_h):
        raise DataError("lstm: gate projection widths do not conform")
    tape.add_flops(flops_lstm_step(d_h))
    z = zx_t.value + h_prev.value @ w_h.value
    i = _sig(z[:, :d_h])
    f = _sig(z[:, d_h : 2 * d_h])
    g_ = np.tanh(z[:, 2 * d_h : 3 * d_h])
    o = _sig(z[:, 3 * d_h :])
    c = f * c_prev.value + i * g_
    tc = np.tanh(c)
    h = o * tc
    out = np.concatenate([h, c], axis=1)

    def back(grad):
        gh, gc = grad[:, :d_h], grad[:, d_h:]
        do = gh * tc
        dc = gc + gh * o * (1 - tc * tc)
        df = dc * c_prev.value
        di = dc * g_
        dg = dc * i
        _acc(c_prev, dc * f)
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g_ * g_), do * o * (1 - o)],
            axis=1,
        )
        _acc(zx_t, dz)
        _acc(h_prev, dz @ w_h.value.T)
        _acc(w_h, h_prev.value.T @ dz)

    return tape.record(out, back)


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def lstm_cell(tape, x_t, h_prev, c_prev, w_x, w_h, b):
    """One full LSTM step from the raw input row x_t; returns (h_t, c_t) nodes."""
    zx = linear(tape, x_t, w_x, b)
    hc = lstm_core(tape, zx, h_prev, c_prev, w_h)
    d_h = h_prev.value.shape[1]
    return slice_cols(tape, hc, 0, d_h), slice_cols(tape, hc, d_h, 2 * d_h)


def embedding_lookup(tape, ids, table):
    """Gather rows of an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise DataError("embedding: ids must be a 1-D integer array")
    vocab = table.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DataError(f"embedding: id out of range for vocabulary of {vocab}")

    def back(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, ids, g)
        _acc(table, dt)

    return tape.record(table.value[ids], back)


def cross_entropy(tape, logits, label):
    """Negative log-softmax probability of the true class; returns a 1x1 node."""
    v = logits.value.reshape(-1)
    c = v.size
    if not 0 <= label < c:
        raise DataError(f"cross_entropy: label {label} out of range for {c} classes")
    tape.add_flops(flops_cross_entropy(c))
    p = _softmax_rows(v[None, :])[0]
    loss = -np.log(p[label])

    def back(g):
        d = p.copy()
        d[label] -= 1.0
        _acc(logits, (g.reshape(()) * d).reshape(logits.value.shape))

    return tape.record(np.full((1, 1), loss, dtype=logits.value.dtype), back)


def slice_rows(tape, x, i0, i1):
    def back(g):
        dx = np.zeros_like(x.value)
        dx[i0:i1] = g
        _acc(x, dx)

    return tape.record(x.value[i0:i1], back)


def slice_cols(tape, x, j0, j1):
    def back(g):
        dx = np.zeros_like(x.value)
        dx[:, j0:j1] = g
        _acc(x, dx)

    return tape.record(x.value[:, j0:j1], back)


def concat_rows(tape, nodes):
    sizes = [n.value.shape[0] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for n, o0, o1 in zip(nodes, offsets[:-1], offsets[1:]):
            _acc(n, g[o0:o1])

    return tape.record(np.concatenate([n.value for n in nodes], axis=0), back)


def concat_cols(tape, nodes):
    sizes = [n.value.shape[1] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for n, o0, o1 in zip(nodes, offsets[:-1], offsets[1:]):
            _acc(n, g[:, o0:o1])

    return tape.record(np.concatenate([n.value for n in nodes], axis=1), back)


def transpose(tape, x):
    def back(g):
        _acc(x, g.T)

    return tape.record(x.value.T, back)


def mean_rows(tape, x):
    n = x.value.shape[0]
    tape.add_flops(flops_elementwise(x.value.size))

    def back(g):
        _acc(x, np.repeat(g / n, n, axis=0))

    return tape.record(x.value.mean(axis=0, keepdims=True), back)


def mean_pool_rows(tape, x, stride):
    """Non-overlapping mean pooling over rows; output length ceil(T/stride)."""
    if stride < 1:
        raise DataError("mean_pool: stride must be >= 1")
    t, d = x.value.shape
    t_out = -(-t // stride)
    tape.add_flops(flops_mean_pool(t, t_out, d))
    bounds = [(i * stride, min((i + 1) * stride, t)) for i in range(t_out)]
    y = np.stack([x.value[a:b].mean(axis=0) for a, b in bounds])

    def back(g):
        dx = np.zeros_like(x.value)
        for row, (a, b) in enumerate(bounds):
            dx[a:b] = g[row] / (b - a)
        _acc(x, dx)

    return tape.record(y, back)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named trainable tensors with matching gradient slots.

    Iteration order is lexicographic by name so updates, counting, and
    serialization are deterministic.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._nodes: dict[str, Node] = {}

    def add(self, name, value) -> Node:
        if name in self._nodes:
            raise DataError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        node = Node(arr)
        self._nodes[name] = node
        return node

    def __getitem__(self, name) -> Node:
        return self._nodes[name]

    def __contains__(self, name):
        return name in self._nodes

    def names(self):
        return sorted(self._nodes)

    def items(self):
        return [(n, self._nodes[n]) for n in self.names()]

    def zero_grad(self):
        for node in self._nodes.values():
            node.grad = None

    def size(self) -> int:
        return sum(n.value.size for n in self._nodes.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, node in self.items():
            out.add(name, node.value)
        return out

    def save(self, directory):
        """Write one STF file per parameter plus a tab-separated index."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, (name, node) in enumerate(self.items()):
            rel = f"p{i:04d}.stf"
            v = node.value
            tensorio.write_tensor(directory / rel, v.reshape(1, -1) if v.ndim == 1 else v)
            shape = ",".join(str(s) for s in v.shape)
            lines.append(f"{name}\t{rel}\t{shape}")
        (directory / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory, dtype=np.float32) -> "ParamStore":
        directory = Path(directory)
        index = directory / "index.txt"
        if not index.exists():
            raise DataError(f"missing file: {index}")
        store = cls(dtype)
        for ln in index.read_text(encoding="utf-8").splitlines():
            if not ln.strip():
                continue
            name, rel, shape_s = ln.split("\t")
            shape = tuple(int(s) for s in shape_s.split(","))
            arr = tensorio.read_tensor(directory / rel).reshape(shape)
            store.add(name, arr)
        return store


def uniform_fan_in(rng, shape, fan_in):
    """Default weight init for linear and recurrent matrices."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def normal_embed(rng, shape, std=0.02):
    """Init for embedding tables, latent arrays, and learned queries."""
    return rng.normal(0.0, std, size=shape)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(build_loss, params: ParamStore, eps=1e-5) -> float:
    """Compare tape gradients against central differences.

    ``build_loss(tape)`` must rebuild the forward pass from the live
    parameter values and return a scalar node. Returns the worst relative
    error max|analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    Use a float64 ParamStore.
    """
    tape = Tape()
    params.zero_grad()
    loss = build_loss(tape)
    tape.backward(loss)
    analytic = {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for name, node in params.items()
    }

    worst = 0.0
    for name, node in params.items():
        flat = node.value.reshape(-1)
        ga = analytic[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = float(build_loss(Tape()).value)
            flat[idx] = orig - eps
            lm = float(build_loss(Tape()).value)
            flat[idx] = orig
            numeric = (lp - lm) / (2 * eps)
            err = abs(ga[idx] - numeric) / max(1e-8, abs(ga[idx]) + abs(numeric))
            worst = max(worst, err)
    return worst
