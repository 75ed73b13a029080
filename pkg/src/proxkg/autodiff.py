"""Minimal dense-tensor engine with reverse-mode gradient accumulation.

Tensors wrap contiguous numpy arrays (float64 by default). Every
differentiable op records a backward closure on the output tensor;
``backward()`` on a scalar root walks the graph in reverse topological
order and accumulates gradients into every ``requires_grad`` leaf.

Broadcasting is restricted to the numpy trailing-dimension rule; anything
the model does not need is rejected early.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


class Tensor:
    """Dense n-d array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None
        self._backward_done = False

    def backward(self):
        """Accumulate gradients of this scalar into all reachable leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran on this tensor; rebuild the graph first")
        self._backward_done = True

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _needs_grad(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, backward):
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _make(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape))]

    return _make(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return [
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        ]

    return _make(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bw(g):
        return [(a, g * c)]

    return _make(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _make(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    out = a.data.T

    def bw(g):
        return [(a, g.T)]

    return _make(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return [(a, g.reshape(a.data.shape))]

    return _make(out, (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return [
            (t, np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i, t in enumerate(tensors)
        ]

    return _make(out, tuple(tensors), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.data.shape).copy())]
        return [(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())]

    return _make(out, (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()

    def bw(g):
        return [(a, np.full(a.data.shape, g / n))]

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        return [(a, g / a.data)]

    return _make(out, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        return [(a, g * inside)]

    return _make(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return [(a, g * (1.0 - out * out))]

    return _make(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return [(a, g * (a.data > 0.0))]

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return [(a, g * out * (1.0 - out))]

    return _make(out, (a,), bw)


def dropout(a: Tensor, rate: float, seed: int, layer_id: int, step: int, training: bool) -> Tensor:
    """Inverted dropout with a counter-based generator.

    The mask depends only on (seed, layer_id, step), so replays are
    bit-identical regardless of execution order or thread count.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return a
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, ((layer_id & 0xFFFFFFFF) << 32) | (step & 0xFFFFFFFF)],
                   dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = a.data * mask

    def bw(g):
        return [(a, g * mask)]

    return _make(out, (a,), bw)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup; backward scatter-adds into duplicate ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("gather_rows id out of range")
    out = table.data[ids]

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        return [(table, acc)]

    return _make(out, (table,), bw)


def segment_weighted_sum(values: Tensor, weights: Tensor, segments, num_segments: int) -> Tensor:
    """Per-segment sum of weights[i] * values[i]; empty segments give zero rows."""
    segments = np.asarray(segments, dtype=np.int64)
    if values.data.shape[0] != segments.shape[0] or weights.data.shape[0] != segments.shape[0]:
        raise ValueError("values, weights and segments must align on the first axis")
    if segments.size and segments.max() >= num_segments:
        raise IndexError("segment id out of range")
    weighted = values.data * weights.data[:, None]
    out = np.zeros((num_segments, values.data.shape[1]), dtype=DEFAULT_DTYPE)
    np.add.at(out, segments, weighted)

    def bw(g):
        g_rows = g[segments]
        return [
            (values, g_rows * weights.data[:, None]),
            (weights, (g_rows * values.data).sum(axis=1)),
        ]

    return _make(out, (values, weights), bw)


def segment_softmax(scores: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax within each segment, with per-segment max subtraction."""
    segments = np.asarray(segments, dtype=np.int64)
    if scores.data.ndim != 1 or scores.data.shape[0] != segments.shape[0]:
        raise ValueError("scores must be 1-d and align with segments")
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, scores.data)
    ex = np.exp(scores.data - seg_max[segments])
    denom = np.bincount(segments, weights=ex, minlength=num_segments)
    out = ex / denom[segments]

    def bw(g):
        dot = np.bincount(segments, weights=g * out, minlength=num_segments)
        return [(scores, out * (g - dot[segments]))]

    return _make(out, (scores,), bw)


def conv2d(inp: Tensor, filters: Tensor) -> Tensor:
    """Valid 2-d cross-correlation, stride 1, no padding.

    inp: [B, C_in, H, W], filters: [C_out, C_in, k, k] -> [B, C_out, H-k+1, W-k+1].
    """
    if inp.data.ndim != 4 or filters.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and filters")
    B, C_in, H, W = inp.data.shape
    C_out, C_in_f, kh, kw = filters.data.shape
    if C_in != C_in_f:
        raise ValueError(f"channel mismatch: input {C_in}, filters {C_in_f}")
    if kh > H or kw > W:
        raise ValueError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    windows = np.lib.stride_tricks.sliding_window_view(inp.data, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", windows, filters.data, optimize=True)

    def bw(g):
        g_filters = np.einsum("bchwij,bohw->ocij", windows, g, optimize=True)
        g_pad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        g_windows = np.lib.stride_tricks.sliding_window_view(g_pad, (kh, kw), axis=(2, 3))
        flipped = filters.data[:, :, ::-1, ::-1]
        g_inp = np.einsum("bohwij,ocij->bchw", g_windows, flipped, optimize=True)
        return [(inp, g_inp), (filters, g_filters)]

    return _make(out, (inp, filters), bw)
