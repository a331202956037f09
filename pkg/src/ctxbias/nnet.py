"""Layers shared by the transducer, the context encoders and the adapters."""
from __future__ import annotations

from collections import defaultdict
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, DomainError, Tensor


class Module:
    """Attribute-registered container of parameters and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _param(arr, name: str | None = None) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.table = _param(nx.xavier_uniform(rng, vocab_size, dim))

    def __call__(self, ids: Sequence[int]) -> Tensor:
        return embed(ids, self)


def embed(ids: Sequence[int], layer: Embedding) -> Tensor:
    ids = list(ids)
    bad = [i for i in ids if not 0 <= i < layer.vocab_size]
    if bad:
        raise ContractError(f"token id {bad[0]} outside embedding of size {layer.vocab_size}")
    return nx.take_rows(layer.table, ids)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = _param(nx.xavier_uniform(rng, fan_in, fan_out))
        self.bias = _param(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"linear: input {x.shape} vs weight {self.weight.shape}")
        lead = x.shape[:-1]
        y = nx.matmul(x if x.ndim == 2 else nx.reshape(x, (-1, x.shape[-1])), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y if x.ndim == 2 else nx.reshape(y, lead + (y.shape[-1],))


class FeedForward(Module):
    """Affine layers with tanh in between; the last layer is linear."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        return feed_forward(x, self.layers)


def feed_forward(x: Tensor, layers: Sequence[Linear]) -> Tensor:
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = nx.tanh(x)
    return x


# --- LSTM -----------------------------------------------------------------

def lstm_cell(x, h, c, w_x, w_h, b):
    """One step on raw arrays; returns (h, c, cache).

    Gate order is input, forget, candidate, output. The sigmoids are taken
    as 0.5 * (tanh(z / 2) + 1) so all four gates share one tanh call.
    """
    z = x @ w_x + h @ w_h + b
    n = w_h.shape[0]
    z[:, :2 * n] *= 0.5
    z[:, 3 * n:] *= 0.5
    a = np.tanh(z)
    g = a[:, 2 * n:3 * n]
    a[:, :2 * n] += 1.0
    a[:, :2 * n] *= 0.5
    a[:, 3 * n:] += 1.0
    a[:, 3 * n:] *= 0.5
    i, f, o = a[:, :n], a[:, n:2 * n], a[:, 3 * n:]
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, g, o, tc)


def lstm_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` of shape (n, D) or (B, n, D).

    Output has the same leading shape with H features; position j holds the
    state after consuming x[0..j] (or x[j..n-1] when ``reverse``).
    """
    squeeze = x.ndim == 2
    xs = x.data[None] if squeeze else x.data
    bsz, n, _ = xs.shape
    if n == 0:
        raise DomainError("lstm over an empty sequence")
    hid = w_h.shape[0]
    order = range(n - 1, -1, -1) if reverse else range(n)
    h = np.zeros((bsz, hid))
    c = np.zeros((bsz, hid))
    out = np.empty((bsz, n, hid))
    caches = []
    for t in order:
        h_prev, c_prev = h, c
        h, c, cache = lstm_cell(xs[:, t], h, c, w_x.data, w_h.data, b.data)
        out[:, t] = h
        caches.append((t, h_prev, c_prev, cache))

    def vjp(g):
        g = g[None] if squeeze else g
        gwx = np.zeros_like(w_x.data)
        gwh = np.zeros_like(w_h.data)
        gb = np.zeros_like(b.data)
        gx = np.zeros_like(xs)
        dh_next = np.zeros((bsz, hid))
        dc_next = np.zeros((bsz, hid))
        dz = np.empty((bsz, 4 * hid))
        for t, h_prev, c_prev, (i, f, gg, o, tc) in reversed(caches):
            dh = g[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz[:, :hid] = dc * gg * i * (1.0 - i)
            dz[:, hid:2 * hid] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * hid:3 * hid] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * hid:] = dh * tc * o * (1.0 - o)
            gwx += xs[:, t].T @ dz
            gwh += h_prev.T @ dz
            gb += dz.sum(axis=0)
            gx[:, t] = dz @ w_x.data.T
            dh_next = dz @ w_h.data.T
            dc_next = dc * f
        return (gx[0] if squeeze else gx), gwx, gwh, gb

    return nx.record(out[0] if squeeze else out, (x, w_x, w_h, b), vjp)


class LstmLayer(Module):
    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.w_x = _param(nx.xavier_uniform(rng, input_dim, 4 * hidden))
        self.w_h = _param(nx.xavier_uniform(rng, hidden, 4 * hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate
        self.b = _param(bias)

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        return lstm_sequence(x, self.w_x, self.w_h, self.b, reverse=reverse)

    def step(self, x: np.ndarray, state):
        """Advance one step on raw arrays (inference only)."""
        h, c = state
        h, c, _ = lstm_cell(x, h, c, self.w_x.data, self.w_h.data, self.b.data)
        return h, (h, c)

    def initial_state(self, batch: int = 1):
        return np.zeros((batch, self.hidden)), np.zeros((batch, self.hidden))


class StackedLstm(Module):
    def __init__(self, input_dim: int, hidden: int, layers: int, rng: np.random.Generator):
        super().__init__()
        self.layers = [LstmLayer(input_dim if i == 0 else hidden, hidden, rng) for i in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def initial_state(self):
        return [layer.initial_state() for layer in self.layers]

    def step(self, x: np.ndarray, states):
        new = []
        for layer, st in zip(self.layers, states):
            x, st = layer.step(x, st)
            new.append(st)
        return x, new


class BiLstmEncoder(Module):
    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator, depth: int = 1):
        super().__init__()
        self.hidden = hidden
        self.fwd = [LstmLayer(input_dim if i == 0 else 2 * hidden, hidden, rng) for i in range(depth)]
        self.bwd = [LstmLayer(input_dim if i == 0 else 2 * hidden, hidden, rng) for i in range(depth)]

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden

    def final_states(self, seqs: Sequence[Tensor]) -> Tensor:
        """Final states for several exact-length sequences, one row each.

        Sequences of equal length are batched together; no padding is used.
        """
        groups: dict[int, list[int]] = defaultdict(list)
        for i, s in enumerate(seqs):
            if s.shape[0] == 0:
                raise DomainError("bilstm over an empty sequence")
            groups[s.shape[0]].append(i)
        parts, order = [], []
        for n in sorted(groups):
            idx = groups[n]
            batch = nx.stack([seqs[i] for i in idx])
            parts.append(self._run(batch))
            order.extend(idx)
        rows = nx.concat(parts, axis=0)
        inverse = np.argsort(np.asarray(order))
        return nx.index(rows, inverse)

    def _run(self, x: Tensor) -> Tensor:
        for fwd, bwd in zip(self.fwd, self.bwd):
            x = nx.concat([fwd(x), bwd(x, reverse=True)], axis=-1)
        n, hid = x.shape[-2], self.hidden
        if x.ndim == 2:
            return nx.concat([x[n - 1, :hid], x[0, hid:]], axis=0)
        return nx.concat([x[:, n - 1, :hid], x[:, 0, hid:]], axis=1)


def bilstm_final_state(seq: Tensor, enc: BiLstmEncoder) -> Tensor:
    """Forward state after the last step joined with backward state after the first."""
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise DomainError("bilstm_final_state needs a non-empty (n, D) sequence")
    return enc._run(seq)


# --- attention ------------------------------------------------------------

class AttentionParams(Module):
    def __init__(self, query_dim: int, key_dim: int, value_dim: int, rng: np.random.Generator,
                 attn_dim: int = 32, out_dim: int | None = None, heads: int = 2,
                 zero_value: bool = True):
        super().__init__()
        out_dim = query_dim if out_dim is None else out_dim
        if attn_dim % heads or out_dim % heads:
            raise DimensionError(f"dims {attn_dim}/{out_dim} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = _param(nx.xavier_uniform(rng, query_dim, attn_dim))
        self.w_k = _param(nx.xavier_uniform(rng, key_dim, attn_dim))
        self.w_v = _param(np.zeros((value_dim, out_dim)) if zero_value
                          else nx.xavier_uniform(rng, value_dim, out_dim))


def scaled_dot_attention(query: Tensor, keys: Tensor, values: Tensor,
                         params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Multi-head attention of each query row over the K key/value rows.

    Returns (context, scores) with shapes (n, d_v) and (n, K); a 1-D query
    gives (d_v,) and (K,). ``scores`` is the average over heads.
    """
    vector = query.ndim == 1
    if vector:
        query = nx.reshape(query, (1, -1))
    if keys.shape[0] == 0:
        raise ContractError("attention over an empty key list")
    if keys.shape[0] != values.shape[0]:
        raise DimensionError(f"{keys.shape[0]} keys but {values.shape[0]} values")
    for x, w, what in ((query, params.w_q, "query"), (keys, params.w_k, "key"), (values, params.w_v, "value")):
        if x.shape[-1] != w.shape[0]:
            raise DimensionError(f"{what} dim {x.shape} does not match projection {w.shape}")
    q = nx.matmul(query, params.w_q)
    k = nx.matmul(keys, params.w_k)
    v = nx.matmul(values, params.w_v)
    h = params.heads
    dq, dv = q.shape[1] // h, v.shape[1] // h
    contexts, score_sum = [], None
    for j in range(h):
        qh = q[:, j * dq:(j + 1) * dq]
        kh = k[:, j * dq:(j + 1) * dq]
        vh = v[:, j * dv:(j + 1) * dv]
        a = nx.softmax(nx.scale(nx.matmul(qh, nx.transpose(kh)), 1.0 / np.sqrt(dq)))
        contexts.append(nx.matmul(a, vh))
        score_sum = a if score_sum is None else score_sum + a
    context = contexts[0] if h == 1 else nx.concat(contexts, axis=1)
    scores = score_sum if h == 1 else nx.scale(score_sum, 1.0 / h)
    if vector:
        return nx.reshape(context, (-1,)), nx.reshape(scores, (-1,))
    return context, scores
