"""Contextual biasing: context encoders, encoder-side and prediction-side adapters.

A biasing list always starts with the ``<no-bias>`` entry. Each embedding
space (char keys, subword values, PLM) owns a learned vector for that entry
instead of encoding a literal string.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .nnet import AttentionParams, BiLstmEncoder, Embedding, Linear, Module, StackedLstm, \
    scaled_dot_attention
from .numerics import ContractError, DimensionError, DomainError, Tensor
from .tokenize import NO_BIAS, CharVocab, SubwordVocab, TokenSequence, encode_char, \
    encode_subword, normalize
from .transducer import AudioFeatures, EncoderStates, PredStates, Transducer, rnnt_loss

@dataclass(frozen=True)
class BiasEntry:
    text: str
    char_ids: TokenSequence
    subword_ids: TokenSequence
    is_no_bias: bool = False

    def __post_init__(self):
        if self.is_no_bias and (len(self.char_ids) or len(self.subword_ids)):
            raise ContractError("<no-bias> entry must carry no tokens")
        if not self.is_no_bias and not (len(self.char_ids) and len(self.subword_ids)):
            raise ContractError(f"bias entry {self.text!r} has no tokens")

    @classmethod
    def no_bias(cls) -> "BiasEntry":
        return cls(NO_BIAS, TokenSequence((), "char"), TokenSequence((), "subword"), True)

    @classmethod
    def from_text(cls, text: str, char_vocab: CharVocab, sub_vocab: SubwordVocab) -> "BiasEntry":
        text = normalize(text)
        return cls(text, encode_char(text, char_vocab), encode_subword(text, sub_vocab))


@dataclass
class BiasingList:
    entries: list[BiasEntry]
    correct_index: int | None = None

    def __post_init__(self):
        if not self.entries or not self.entries[0].is_no_bias:
            raise ContractError("biasing list must start with <no-bias>")
        if sum(e.is_no_bias for e in self.entries) != 1:
            raise ContractError("biasing list must contain exactly one <no-bias>")
        texts = [e.text for e in self.entries]
        if len(set(texts)) != len(texts):
            raise ContractError("biasing list texts must be unique")
        if self.correct_index is not None and not 0 < self.correct_index < len(self.entries):
            raise ContractError(f"correct_index {self.correct_index} out of range")

    @property
    def K(self) -> int:
        return len(self.entries) - 1

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.entries]

    @classmethod
    def from_texts(cls, texts: Sequence[str], char_vocab: CharVocab, sub_vocab: SubwordVocab,
                   correct_index: int | None = None) -> "BiasingList":
        """``texts`` excludes ``<no-bias>``; indices shift by one once it is prepended."""
        entries = [BiasEntry.no_bias()] + [BiasEntry.from_text(t, char_vocab, sub_vocab) for t in texts]
        return cls(entries, correct_index)

    def to_text(self, correct: Iterable[str] | None = None) -> str:
        marked = set(correct) if correct is not None else (
            {self.entries[self.correct_index].text} if self.correct_index is not None else set())
        lines = [NO_BIAS] + [("*" if e.text in marked else "") + e.text for e in self.entries[1:]]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, char_vocab: CharVocab, sub_vocab: SubwordVocab) -> "BiasingList":
        lines = [ln for ln in text.split("\n") if ln.strip()]
        if not lines or lines[0] != NO_BIAS:
            raise ContractError(f"biasing list text must start with {NO_BIAS}")
        words, correct = [], None
        for i, line in enumerate(lines[1:], start=1):
            if line.startswith("*"):
                line = line[1:]
                correct = i if correct is None else correct
            words.append(line)
        return cls.from_texts(words, char_vocab, sub_vocab, correct)


def build_biasing_list(transcript: str, rare_words: Sequence[str], K: int, rng: np.random.Generator,
                       char_vocab: CharVocab, sub_vocab: SubwordVocab, mode: str = "train",
                       include_correct: bool = True) -> BiasingList:
    """Rare words of the transcript plus sampled rare-word distractors, K in total.

    ``include_correct=False`` gives a distractor-only list of the same size.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if K < 0:
        raise DomainError("K must be non-negative")
    rare = list(dict.fromkeys(rare_words))
    rare_set = set(rare)
    correct = list(dict.fromkeys(w for w in normalize(transcript).split() if w in rare_set))
    pool = [w for w in rare if w not in set(correct)]
    chosen = correct if include_correct else []
    n = max(K - len(chosen), 0)
    if n > len(pool):
        warnings.warn(f"K={K} exceeds available rare words; using {len(pool)} distractors", stacklevel=2)
        n = len(pool)
    picks = rng.choice(len(pool), size=n, replace=False) if n else []
    items = chosen + [pool[i] for i in picks]
    items = [items[i] for i in rng.permutation(len(items))]
    correct_index = items.index(correct[0]) + 1 if include_correct and correct else None
    return BiasingList.from_texts(items, char_vocab, sub_vocab, correct_index)


@dataclass
class ContextEmbeddings:
    keys: Tensor  # (K+1, D_key)
    values: Tensor  # (K+1, D_value)
    key_source: str
    value_source: str

    def __post_init__(self):
        if self.keys.shape[0] != self.values.shape[0]:
            raise DimensionError(f"{self.keys.shape[0]} key rows vs {self.values.shape[0]} value rows")


class ContextEncoder(Module):
    """Embedding + BiLSTM final state per entry, with a learned ``<no-bias>`` row."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int, rng: np.random.Generator,
                 level: str, depth: int = 1):
        super().__init__()
        self.level = level
        self.embedding = Embedding(vocab_size, embed_dim, rng)
        self.bilstm = BiLstmEncoder(embed_dim, hidden, rng, depth=depth)
        self.no_bias = Tensor(rng.uniform(-0.1, 0.1, size=2 * hidden), requires_grad=True)

    @property
    def output_dim(self) -> int:
        return self.bilstm.output_dim

    def __call__(self, blist: BiasingList) -> Tensor:
        ids = [e.char_ids if self.level == "char" else e.subword_ids for e in blist.entries[1:]]
        rows = [nx.reshape(self.no_bias, (1, -1))]
        if ids:
            rows.append(self.bilstm.final_states([self.embedding(s) for s in ids]))
        return nx.concat(rows, axis=0)


def encode_context_char(blist: BiasingList, encoder: ContextEncoder) -> Tensor:
    return encoder(blist)


def encode_context_subword(blist: BiasingList, encoder: ContextEncoder) -> Tensor:
    return encoder(blist)


class PlmEncoder(Module):
    """LSTM language model over subwords; its hidden states serve as queries and keys."""

    def __init__(self, vocab_size: int, rng: np.random.Generator, *, bos_id: int = 1,
                 embed_dim: int = 32, hidden: int = 64, layers: int = 2):
        super().__init__()
        self.bos_id = bos_id
        self.hidden = hidden
        self.embedding = Embedding(vocab_size, embed_dim, rng)
        self.lstm = StackedLstm(embed_dim, hidden, layers, rng)
        self.output = Linear(hidden, vocab_size, rng)

    @property
    def output_dim(self) -> int:
        return self.hidden

    def prefix_states(self, tokens: Sequence[int]) -> Tensor:
        """Row u is the state after ``<bos>`` + tokens[:u]; shape (len+1, H)."""
        return self.lstm(self.embedding([self.bos_id] + list(tokens)))

    def lm_loss(self, tokens: Sequence[int]) -> tuple[Tensor, int]:
        """Summed next-token negative log-likelihood and the number of predictions."""
        tokens = list(tokens)
        if not tokens:
            raise DomainError("language-model loss needs at least one token")
        states = self.prefix_states(tokens[:-1])
        logp = nx.log_softmax(self.output(states))
        picked = nx.index(logp, (np.arange(len(tokens)), np.asarray(tokens)))
        return nx.scale(nx.total(picked), -1.0), len(tokens)

    def encode_phrases(self, seqs: Sequence[Sequence[int]]) -> Tensor:
        """Final state after ``<bos>`` + each phrase, batching equal lengths."""
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(seqs):
            groups.setdefault(len(s), []).append(i)
        parts, order = [], []
        for n in sorted(groups):
            idx = groups[n]
            ids = np.array([[self.bos_id] + list(seqs[i]) for i in idx])
            emb = nx.reshape(nx.take_rows(self.embedding.table, ids.reshape(-1)), ids.shape + (-1,))
            parts.append(self.lstm(emb)[:, n, :])
            order.extend(idx)
        rows = nx.concat(parts, axis=0)
        return nx.index(rows, np.argsort(np.asarray(order)))

    def start(self):
        return self.advance(self.lstm.initial_state(), self.bos_id)

    def advance(self, state, token: int):
        """One incremental step on raw arrays; returns (hidden row, state)."""
        out, state = self.lstm.step(self.embedding.table.data[token][None], state)
        return out[0], state


def plm_prefix_state(prefix: Sequence[int], plm: PlmEncoder) -> Tensor:
    return plm.prefix_states(prefix)[len(prefix)]


def encode_context_plm(blist: BiasingList, plm: PlmEncoder, no_bias: Tensor) -> Tensor:
    """``no_bias`` is the learned PLM-space row; it trains while the PLM stays frozen."""
    rows = [nx.reshape(no_bias, (1, -1))]
    if blist.K:
        rows.append(plm.encode_phrases([e.subword_ids.ids for e in blist.entries[1:]]))
    return nx.concat(rows, axis=0)


@dataclass(frozen=True)
class VariantConfig:
    name: str
    eba_key_source: str
    eba_value_source: str
    pnba_enabled: bool = False
    pnba_query_source: str | None = None
    pnba_key_source: str | None = None
    pnba_value_source: str | None = None

    def __post_init__(self):
        if self.eba_key_source not in ("char", "subword") or self.eba_value_source not in ("char", "subword"):
            raise ValueError(f"{self.name}: encoder adapter sources must be char or subword")
        if self.pnba_enabled:
            if self.pnba_query_source not in ("prednet", "plm") or self.pnba_key_source not in ("subword", "plm"):
                raise ValueError(f"{self.name}: bad prediction adapter sources")
            if self.pnba_value_source != "subword":
                raise ValueError(f"{self.name}: prediction adapter values are subword embeddings")

    @property
    def uses_plm(self) -> bool:
        return self.pnba_enabled and "plm" in (self.pnba_query_source, self.pnba_key_source)

    @property
    def sources(self) -> set[str]:
        out = {self.eba_key_source, self.eba_value_source}
        if self.pnba_enabled:
            out |= {self.pnba_key_source, self.pnba_value_source}
        return out


VARIANTS = {v.name: v for v in (
    VariantConfig("Baseline", "subword", "subword"),
    VariantConfig("Char-I", "char", "char"),
    VariantConfig("Char-II", "char", "subword"),
    VariantConfig("Char-Subword", "char", "subword", True, "prednet", "subword", "subword"),
    VariantConfig("Subword-PLM", "subword", "subword", True, "prednet", "subword", "subword"),
    VariantConfig("Char-PLM", "char", "subword", True, "plm", "plm", "subword"),
)}


def acoustic_bias(h: EncoderStates, ctx: ContextEmbeddings,
                  adapter: AttentionParams) -> tuple[EncoderStates, Tensor]:
    """Each frame attends over the list independently; the result is added to h."""
    context, scores = scaled_dot_attention(h.h, ctx.keys, ctx.values, adapter)
    if context.shape != h.h.shape:
        raise DimensionError(f"bias {context.shape} does not match encoder states {h.h.shape}")
    return EncoderStates(h.h + context, True), scores


def semantic_bias(g: PredStates, query_source: str, ctx: ContextEmbeddings, adapter: AttentionParams,
                  plm_states: Tensor | None = None) -> tuple[PredStates, Tensor]:
    if query_source == "plm":
        if plm_states is None:
            raise ContractError("PLM query source needs plm_states")
        if plm_states.shape[0] != g.g.shape[0]:
            raise DimensionError(f"{plm_states.shape[0]} PLM rows vs {g.g.shape[0]} prediction rows")
        query = plm_states
    elif query_source == "prednet":
        query = g.g
    else:
        raise ValueError(f"unknown query source {query_source!r}")
    context, scores = scaled_dot_attention(query, ctx.keys, ctx.values, adapter)
    return PredStates(g.g + context, True), scores


@dataclass
class ListContext:
    """Context embeddings of one biasing list, computed once and shared."""

    blist: BiasingList
    embeddings: dict[str, Tensor] = field(default_factory=dict)


class BiasingAdapters(Module):
    """All trainable biasing components for one variant.

    The subword value encoder is a single module feeding both adapters;
    each adapter has its own query/key/value projections.
    """

    def __init__(self, variant: VariantConfig, char_vocab_size: int, sub_vocab_size: int,
                 model_dim: int, rng: np.random.Generator, *, plm: PlmEncoder | None = None,
                 embed_dim: int = 32, context_hidden: int = 32, attn_dim: int = 32, heads: int = 2,
                 zero_value: bool = True):
        super().__init__()
        if variant.uses_plm and plm is None:
            raise ContractError(f"variant {variant.name} needs a PLM encoder")
        self.variant = variant
        object.__setattr__(self, "plm", plm)  # frozen, tagged separately
        need = variant.sources
        self.char_encoder = ContextEncoder(char_vocab_size, embed_dim, context_hidden, rng, "char") \
            if "char" in need else None
        self.sub_encoder = ContextEncoder(sub_vocab_size, embed_dim, context_hidden, rng, "subword") \
            if "subword" in need else None
        self.plm_no_bias = Tensor(rng.uniform(-0.1, 0.1, size=plm.output_dim), requires_grad=True) \
            if variant.uses_plm else None
        dims = {"char": 2 * context_hidden, "subword": 2 * context_hidden,
                "plm": plm.output_dim if plm is not None else 0, "prednet": model_dim}
        self.eba = AttentionParams(model_dim, dims[variant.eba_key_source], dims[variant.eba_value_source],
                                   rng, attn_dim=attn_dim, out_dim=model_dim, heads=heads,
                                   zero_value=zero_value)
        self.pnba = AttentionParams(dims[variant.pnba_query_source], dims[variant.pnba_key_source],
                                    dims[variant.pnba_value_source], rng, attn_dim=attn_dim,
                                    out_dim=model_dim, heads=heads, zero_value=zero_value) \
            if variant.pnba_enabled else None

    def context(self, blist: BiasingList) -> ListContext:
        ctx = ListContext(blist)
        if self.char_encoder is not None:
            ctx.embeddings["char"] = encode_context_char(blist, self.char_encoder)
        if self.sub_encoder is not None:
            ctx.embeddings["subword"] = encode_context_subword(blist, self.sub_encoder)
        if self.variant.uses_plm:
            ctx.embeddings["plm"] = encode_context_plm(blist, self.plm, self.plm_no_bias)
        return ctx

    def eba_context(self, ctx: ListContext) -> ContextEmbeddings:
        v = self.variant
        return ContextEmbeddings(ctx.embeddings[v.eba_key_source], ctx.embeddings[v.eba_value_source],
                                 v.eba_key_source, v.eba_value_source)

    def pnba_context(self, ctx: ListContext) -> ContextEmbeddings:
        v = self.variant
        return ContextEmbeddings(ctx.embeddings[v.pnba_key_source], ctx.embeddings[v.pnba_value_source],
                                 v.pnba_key_source, v.pnba_value_source)

    def bias_encoder(self, enc: EncoderStates, ctx: ListContext) -> tuple[EncoderStates, Tensor]:
        return acoustic_bias(enc, self.eba_context(ctx), self.eba)

    def bias_pred(self, pred: PredStates, tokens: Sequence[int],
                  ctx: ListContext) -> tuple[PredStates, Tensor | None]:
        if self.pnba is None:
            return pred, None
        plm_states = self.plm.prefix_states(tokens) if self.variant.pnba_query_source == "plm" else None
        return semantic_bias(pred, self.variant.pnba_query_source, self.pnba_context(ctx), self.pnba,
                             plm_states)

    def decoder_hooks(self, blist: BiasingList) -> "DecodeHooks":
        return DecodeHooks(self, self.context(blist))


class DecodeHooks:
    """Greedy-decoding view of the adapters for one biasing list."""

    def __init__(self, adapters: BiasingAdapters, ctx: ListContext):
        self.adapters = adapters
        self.ctx = ctx
        self.use_plm_query = adapters.pnba is not None and adapters.variant.pnba_query_source == "plm"
        self._pnba_ctx = adapters.pnba_context(ctx) if adapters.pnba is not None else None
        self.encoder_scores: np.ndarray | None = None

    def bias_encoder(self, enc: EncoderStates) -> EncoderStates:
        out, scores = self.adapters.bias_encoder(enc, self.ctx)
        self.encoder_scores = scores.data
        return out

    def query_start(self):
        return self.adapters.plm.start() if self.use_plm_query else None

    def query_advance(self, qstate, token: int):
        return self.adapters.plm.advance(qstate[1], token) if self.use_plm_query else None

    def bias_pred(self, g_row: np.ndarray, qstate):
        if self._pnba_ctx is None:
            return g_row, None
        query = qstate[0] if self.use_plm_query else g_row
        context, scores = scaled_dot_attention(Tensor._wrap(query, False), self._pnba_ctx.keys,
                                               self._pnba_ctx.values, self.adapters.pnba)
        return g_row + context.data, scores.data


def biased_loss(model: Transducer, adapters: BiasingAdapters | None, frames: np.ndarray,
                target: Sequence[int], blist: BiasingList | None = None) -> Tensor:
    """RNN-T loss of one utterance, contextualized when adapters are given."""
    enc = model.encode_audio(AudioFeatures(frames))
    pred = model.predict(target)
    return biased_loss_from_states(model, adapters, enc, pred, target, blist)


def biased_loss_from_states(model: Transducer, adapters: BiasingAdapters | None, enc: EncoderStates,
                            pred: PredStates, target: Sequence[int],
                            blist: BiasingList | None = None) -> Tensor:
    """Same loss from precomputed encoder and prediction states (valid while the base is frozen)."""
    if adapters is not None:
        ctx = adapters.context(blist)
        enc, _ = adapters.bias_encoder(enc, ctx)
        pred, _ = adapters.bias_pred(pred, target, ctx)
    return rnnt_loss(model.joint(enc, pred), target, model.blank_id)
