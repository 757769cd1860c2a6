"""Learnable building blocks on top of :mod:`graphmft.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .graphs import BatchGraph, PairGraph, as_batch
from .tensor import Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Anything exposing named parameter tensors."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")


class Affine(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.W = _uniform(rng, (d_out, d_in), d_in, dtype)
        self.b = _zeros((d_out,), dtype) if bias else None

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise T.ShapeError(f"affine layer expects (batch, {self.d_in}) input, got {x.shape}")
        y = x @ self.W.T
        return y + self.b if self.b is not None else y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.E = Tensor((rng.standard_normal((num, dim)) * 0.02).astype(dtype), requires_grad=True)

    def __call__(self, idx) -> Tensor:
        idx = np.asarray(idx, dtype=np.intp)
        n = self.E.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"speaker index out of range [0, {n})")
        return T.take_rows(self.E, idx)


class LSTMCell(Module):
    """Gate blocks are stacked in the order input, forget, candidate, output."""

    def __init__(self, d_in: int, h: int, rng: np.random.Generator, dtype=np.float32):
        self.W_ih = _uniform(rng, (4 * h, d_in), d_in, dtype)
        self.W_hh = _uniform(rng, (4 * h, h), h, dtype)
        self.b = _zeros((4 * h,), dtype)

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]

    def run(self, x_rows: Tensor, steps: int, batch: int) -> Tensor:
        """Unroll over ``steps`` time-major blocks of ``batch`` rows; returns (steps*batch, h)."""
        h = self.hidden
        gates_in = x_rows @ self.W_ih.T + self.b
        W_hh_t = self.W_hh.T
        state = Tensor(np.zeros((batch, h), dtype=gates_in.dtype))
        cell = Tensor(np.zeros((batch, h), dtype=gates_in.dtype))
        outs = []
        for t in range(steps):
            g = gates_in[t * batch:(t + 1) * batch] + state @ W_hh_t
            i = T.sigmoid(g[:, :h])
            f = T.sigmoid(g[:, h:2 * h])
            c_hat = T.tanh(g[:, 2 * h:3 * h])
            o = T.sigmoid(g[:, 3 * h:])
            cell = f * cell + i * c_hat
            state = o * T.tanh(cell)
            outs.append(state)
        return T.concat(outs, axis=0)


def _time_major_layout(lengths: list[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Index plans for running variable-length sequences as one padded batch.

    Returns (fwd_gather, bwd_gather, fwd_scatter, bwd_scatter): the gathers
    pick input rows in time-major order (index ``N`` is the zero pad row);
    the scatters pick each utterance's output row back out.
    """
    B = len(lengths)
    steps = max(lengths)
    N = sum(lengths)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.intp)
    fwd = np.full((steps, B), N, dtype=np.intp)
    bwd = np.full((steps, B), N, dtype=np.intp)
    fwd_out = np.empty(N, dtype=np.intp)
    bwd_out = np.empty(N, dtype=np.intp)
    for b, (m, off) in enumerate(zip(lengths, offsets)):
        t = np.arange(m)
        fwd[t, b] = off + t
        bwd[t, b] = off + m - 1 - t
        fwd_out[off + t] = t * B + b
        bwd_out[off + t] = (m - 1 - t) * B + b
    return fwd.ravel(), bwd.ravel(), fwd_out, bwd_out


class BiRecurrentEncoder(Module):
    def __init__(self, d_in: int, h: int, d: int, rng: np.random.Generator, dtype=np.float32):
        self.fwd = LSTMCell(d_in, h, rng, dtype)
        self.bwd = LSTMCell(d_in, h, rng, dtype)
        self.proj = Affine(2 * h, d, rng, dtype)

    def __call__(self, seq: Tensor, lengths: list[int] | None = None) -> Tensor:
        """Encode the rows of ``seq``; ``lengths`` splits them into independent sequences."""
        seq = T.as_tensor(seq)
        if lengths is None:
            lengths = [seq.shape[0]]
        if sum(lengths) != seq.shape[0] or min(lengths) < 1:
            raise T.ShapeError(f"sequence lengths {lengths} do not cover {seq.shape[0]} rows")
        fwd_in, bwd_in, fwd_out, bwd_out = _time_major_layout(lengths)
        steps, B = max(lengths), len(lengths)
        pad = Tensor(np.zeros((1, seq.shape[1]), dtype=seq.dtype))
        padded = T.concat([seq, pad], axis=0)
        hf = self.fwd.run(T.take_rows(padded, fwd_in), steps, B)
        hb = self.bwd.run(T.take_rows(padded, bwd_in), steps, B)
        both = T.concat([T.take_rows(hf, fwd_out), T.take_rows(hb, bwd_out)], axis=1)
        return self.proj(both)


class GATLayer(Module):
    """Multi-head graph attention with concatenated heads.

    ``W`` stacks the per-head projections (head ``k`` owns rows
    ``k*dk:(k+1)*dk``); ``a[k]`` is that head's attention vector, its first
    half scoring the centre node and its second half the neighbour.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32, slope: float = 0.2):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        dk = d // heads
        self.W = _uniform(rng, (d, d), d, dtype)
        self.a = _uniform(rng, (heads, 2 * dk), 2 * dk, dtype)
        self.heads = heads
        self.slope = slope

    def __call__(
        self,
        X: Tensor,
        graph: PairGraph | BatchGraph,
        training: bool = False,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
        return_attention: bool = False,
    ):
        g = as_batch(graph)
        N, d = X.shape
        if N != g.num_nodes:
            raise T.ShapeError(f"feature matrix has {N} rows but the graph has {g.num_nodes} nodes")
        if np.bincount(g.src, minlength=N).min() == 0:
            raise ValueError("graph has a node without neighbours; attention is undefined there")
        K = self.heads
        dk = d // K
        Wh = (X @ self.W.T).reshape(N, K, dk)
        score_self = (Wh * self.a[:, :dk]).sum(axis=2)
        score_nb = (Wh * self.a[:, dk:]).sum(axis=2)
        e = T.leaky_relu(T.take_rows(score_self, g.src) + T.take_rows(score_nb, g.dst), self.slope)
        alpha = T.segment_softmax(e, g.src, N)
        weights = T.dropout(alpha, dropout, training, rng)
        msgs = T.take_rows(Wh, g.dst) * weights.reshape(len(g.src), K, 1)
        out = T.segment_sum(msgs, g.src, N).reshape(N, d)
        if return_attention:
            return out, alpha
        return out


class GATStack(Module):
    """``L`` attention layers at constant width plus the all-layer projection."""

    def __init__(self, d: int, heads: int, depth: int, rng: np.random.Generator, dtype=np.float32, improved: bool = True):
        self.layers = [GATLayer(d, heads, rng, dtype) for _ in range(depth)]
        self.improved = improved
        if improved:
            self.W_im = Affine((depth + 1) * d, d, rng, dtype, bias=False)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def improved_forward(self, X0: Tensor, graph, training=False, dropout=0.0, rng=None, return_layers=False):
        """Residual layers, then project the concatenation of every layer's output (input included)."""
        g = as_batch(graph)
        states = [X0]
        X = X0
        for layer in self.layers:
            X = X + T.dropout(layer(X, g, training, dropout, rng), dropout, training, rng)
            states.append(X)
        H = self.W_im(T.concat(states, axis=1))
        return (H, states) if return_layers else H

    def vanilla_forward(self, X0: Tensor, graph, training=False, dropout=0.0, rng=None):
        g = as_batch(graph)
        X = X0
        for layer in self.layers:
            X = T.dropout(layer(X, g, training, dropout, rng), dropout, training, rng)
        return X

    def __call__(self, X0, graph, training=False, dropout=0.0, rng=None):
        if self.improved:
            return self.improved_forward(X0, graph, training, dropout, rng)
        return self.vanilla_forward(X0, graph, training, dropout, rng)
