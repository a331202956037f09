"""Neural transducer: audio encoder, prediction network, joint network, loss, decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .nnet import Embedding, FeedForward, Linear, LstmLayer, Module, StackedLstm
from .numerics import ContractError, DimensionError, DomainError, Tensor
from .tokenize import TokenSequence


@dataclass
class AudioFeatures:
    frames: np.ndarray  # (T, F)
    utt_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise DimensionError(f"features must be (T, F), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class EncoderStates:
    h: Tensor  # (T, D)
    contextualized: bool = False


@dataclass
class PredStates:
    g: Tensor  # (U+1, D)
    contextualized: bool = False


@dataclass
class JointLattice:
    log_probs: Tensor  # (T, U+1, V)


@dataclass
class Hypothesis:
    tokens: TokenSequence
    attention: list[np.ndarray] = field(default_factory=list)


class Transducer(Module):
    """Stacked-LSTM encoder, LSTM prediction network and tanh joint network.

    Encoder and prediction outputs are projected to a shared ``model_dim``
    and added before the joint feed-forward stack.
    """

    def __init__(self, feat_dim: int, vocab_size: int, rng: np.random.Generator, *,
                 blank_id: int = 0, bos_id: int = 1, enc_hidden: int = 64, enc_layers: int = 2,
                 pred_embed: int = 32, pred_hidden: int = 64, model_dim: int = 64,
                 joint_hidden: int = 64):
        super().__init__()
        self.feat_dim = feat_dim
        self.vocab_size = vocab_size
        self.blank_id = blank_id
        self.bos_id = bos_id
        self.model_dim = model_dim
        self.encoder = StackedLstm(feat_dim, enc_hidden, enc_layers, rng)
        self.enc_proj = Linear(enc_hidden, model_dim, rng)
        self.pred_embed = Embedding(vocab_size, pred_embed, rng)
        self.pred_lstm = LstmLayer(pred_embed, pred_hidden, rng)
        self.pred_proj = Linear(pred_hidden, model_dim, rng)
        self.joint_net = FeedForward([model_dim, joint_hidden, vocab_size], rng)
        # blank starts near even odds against all labels combined, which keeps a causal
        # encoder from locking into eager label emission before the audio is heard
        self.joint_net.layers[-1].bias.data[blank_id] = math.log(max(vocab_size - 1, 1))

    def encode_audio(self, features: AudioFeatures) -> EncoderStates:
        if features.num_frames == 0:
            raise DomainError("cannot encode empty features")
        if features.frames.shape[1] != self.feat_dim:
            raise DimensionError(f"feature dim {features.frames.shape[1]} != {self.feat_dim}")
        x = Tensor._wrap(features.frames, False)
        return EncoderStates(self.enc_proj(self.encoder(x)))

    def predict(self, tokens: Sequence[int]) -> PredStates:
        ids = list(tokens)
        if self.blank_id in ids:
            raise ContractError("prediction network input contains <blank>")
        emb = self.pred_embed([self.bos_id] + ids)
        return PredStates(self.pred_proj(self.pred_lstm(emb)))

    def joint(self, enc: EncoderStates, pred: PredStates) -> JointLattice:
        h, g = enc.h, pred.g
        if h.shape[-1] != g.shape[-1]:
            raise DimensionError(f"encoder dim {h.shape} vs prediction dim {g.shape}")
        t, u = h.shape[0], g.shape[0]
        s = nx.reshape(h, (t, 1, -1)) + nx.reshape(g, (1, u, -1))
        return JointLattice(nx.log_softmax(self.joint_net(s)))

    # incremental inference on raw arrays

    def pred_start(self):
        return self.pred_step(self.pred_lstm.initial_state(), self.bos_id)

    def pred_step(self, state, token: int):
        """Feed one token; returns (g row of shape (D,), new lstm state)."""
        x = self.pred_embed.table.data[token][None]
        out, state = self.pred_lstm.step(x, state)
        g = out @ self.pred_proj.weight.data + self.pred_proj.bias.data
        return g[0], state

    def joint_logits(self, h_row: np.ndarray, g_row: np.ndarray) -> np.ndarray:
        x = h_row + g_row
        layers = self.joint_net.layers
        for i, layer in enumerate(layers):
            x = x @ layer.weight.data + layer.bias.data
            if i < len(layers) - 1:
                x = np.tanh(x)
        return x


def _lae(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def rnnt_forward(log_probs: np.ndarray, target: Sequence[int], blank: int = 0):
    """Forward variables alpha (T, U+1) and the log-likelihood."""
    T, U1, _ = log_probs.shape
    blank_lp = log_probs[:, :, blank].tolist()
    label_lp = [[log_probs[t, u, target[u]] for u in range(U1 - 1)] for t in range(T)]
    alpha = [[0.0] * U1 for _ in range(T)]
    for t in range(T):
        row, prev = alpha[t], alpha[t - 1] if t else None
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            a = prev[u] + blank_lp[t - 1][u] if t else -math.inf
            b = row[u - 1] + label_lp[t][u - 1] if u else -math.inf
            row[u] = _lae(a, b)
    loglik = alpha[T - 1][U1 - 1] + blank_lp[T - 1][U1 - 1]
    return np.array(alpha), loglik


def rnnt_backward_vars(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> np.ndarray:
    """Backward variables beta (T, U+1); beta[0, 0] is the log-likelihood."""
    T, U1, _ = log_probs.shape
    blank_lp = log_probs[:, :, blank].tolist()
    label_lp = [[log_probs[t, u, target[u]] for u in range(U1 - 1)] for t in range(T)]
    beta = [[0.0] * U1 for _ in range(T)]
    beta[T - 1][U1 - 1] = blank_lp[T - 1][U1 - 1]
    for t in range(T - 1, -1, -1):
        row, nxt = beta[t], beta[t + 1] if t < T - 1 else None
        for u in range(U1 - 1, -1, -1):
            if t == T - 1 and u == U1 - 1:
                continue
            a = nxt[u] + blank_lp[t][u] if t < T - 1 else -math.inf
            b = row[u + 1] + label_lp[t][u] if u < U1 - 1 else -math.inf
            row[u] = _lae(a, b)
    return np.array(beta)


def rnnt_loss(lattice: JointLattice, target: Sequence[int], blank: int = 0) -> Tensor:
    """Negative log-likelihood of ``target`` summed over all monotonic alignments."""
    lp = lattice.log_probs
    target = list(target)
    if lp.ndim != 3:
        raise DimensionError(f"lattice must be (T, U+1, V), got {lp.shape}")
    T, U1, V = lp.shape
    if T < 1:
        raise DomainError("rnnt_loss needs at least one frame")
    if U1 != len(target) + 1:
        raise DimensionError(f"lattice has U+1={U1} but target length is {len(target)}")
    if blank in target:
        raise ContractError("target contains <blank>")
    if any(not 0 <= y < V for y in target):
        raise ContractError("target id outside the output vocabulary")
    alpha, loglik = rnnt_forward(lp.data, target, blank)

    def vjp(g):
        beta = rnnt_backward_vars(lp.data, target, blank)
        grad = np.zeros_like(lp.data)
        # occupancy of each blank / label transition
        grad[:-1, :, blank] = -np.exp(alpha[:-1] + lp.data[:-1, :, blank] + beta[1:] - loglik)
        grad[-1, -1, blank] = -1.0
        if target:
            y = np.asarray(target)
            u = np.arange(U1 - 1)
            grad[:, u, y] = -np.exp(alpha[:, :-1] + lp.data[:, u, y] + beta[:, 1:] - loglik)
        return (grad * float(g),)

    return nx.record(np.array(-loglik), (lp,), vjp)


class DecodeBiasing(Protocol):
    """Hooks greedy decoding uses to contextualize states.

    ``query_start``/``query_advance`` track whatever the prediction-side
    query needs; ``bias_pred`` returns the contextualized g row and the
    attention scores (or None when prediction-side biasing is off).
    """

    def bias_encoder(self, enc: EncoderStates) -> EncoderStates: ...

    def query_start(self): ...

    def query_advance(self, qstate, token: int): ...

    def bias_pred(self, g_row: np.ndarray, qstate) -> tuple[np.ndarray, np.ndarray | None]: ...


def greedy_decode(model: Transducer, features: AudioFeatures, biasing: DecodeBiasing | None = None,
                  max_symbols_per_frame: int = 3) -> Hypothesis:
    if max_symbols_per_frame < 1:
        raise DomainError("max_symbols_per_frame must be >= 1")
    enc = model.encode_audio(features)
    if biasing is not None:
        enc = biasing.bias_encoder(enc)
    h = enc.h.data
    g, state = model.pred_start()
    qstate = biasing.query_start() if biasing is not None else None
    g_used, scores = biasing.bias_pred(g, qstate) if biasing is not None else (g, None)
    tokens: list[int] = []
    records: list[np.ndarray] = []
    for t in range(h.shape[0]):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(model.joint_logits(h[t], g_used)))
            if k == model.blank_id:
                break
            tokens.append(k)
            if scores is not None:
                records.append(scores)
            g, state = model.pred_step(state, k)
            if biasing is not None:
                qstate = biasing.query_advance(qstate, k)
                g_used, scores = biasing.bias_pred(g, qstate)
            else:
                g_used = g
    return Hypothesis(TokenSequence(tuple(tokens), "subword"), records)
