"""Character and BPE subword tokenizers.

Subword pieces that start a word carry a leading ``▁``; decoding turns that
marker back into a word boundary.
"""
from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .numerics import ContractError, DomainError

MARK = "▁"
BLANK, BOS, UNK, NO_BIAS = "<blank>", "<bos>", "<unk>", "<no-bias>"
SUBWORD_SPECIALS = (BLANK, BOS, UNK, NO_BIAS)
MERGES_HEADER = "#MERGES"


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    level: str  # "char" | "subword"

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


@dataclass
class CharVocab:
    symbols: list[str]
    id_of: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.id_of = {s: i for i, s in enumerate(self.symbols)}
        if len(self.id_of) != len(self.symbols):
            raise ContractError("duplicate symbols in char vocabulary")
        if " " not in self.id_of or UNK not in self.id_of:
            raise ContractError("char vocabulary needs space and <unk>")

    @classmethod
    def default(cls, digits: bool = False) -> "CharVocab":
        chars = " '" + string.ascii_lowercase + (string.digits if digits else "")
        return cls([UNK] + list(chars))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK]


@dataclass
class SubwordVocab:
    pieces: list[str]
    merges: list[tuple[str, str]]
    id_of: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.id_of = {p: i for i, p in enumerate(self.pieces)}
        if self.pieces[:len(SUBWORD_SPECIALS)] != list(SUBWORD_SPECIALS):
            raise ContractError(f"subword vocabulary must start with {SUBWORD_SPECIALS}")
        self._word_cache: dict[str, tuple[str, ...]] = {}

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def specials(self) -> dict[str, int]:
        return {s: self.id_of[s] for s in SUBWORD_SPECIALS}

    @property
    def blank_id(self) -> int:
        return self.id_of[BLANK]

    @property
    def bos_id(self) -> int:
        return self.id_of[BOS]

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK]

    @property
    def no_bias_id(self) -> int:
        return self.id_of[NO_BIAS]

    def segment(self, word: str) -> tuple[str, ...]:
        """Apply the merges, in training order, to one word."""
        if word not in self._word_cache:
            syms = _word_symbols(word)
            for a, b in self.merges:
                if len(syms) < 2:
                    break
                syms = _merge(syms, a, b)
            self._word_cache[word] = tuple(syms)
        return self._word_cache[word]

    def save(self, path) -> None:
        lines = list(self.pieces) + [MERGES_HEADER] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if MERGES_HEADER not in lines:
            raise ContractError(f"{path}: missing {MERGES_HEADER} section")
        cut = lines.index(MERGES_HEADER)
        merges = []
        for line in lines[cut + 1:]:
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(lines[:cut], merges)


def _word_symbols(word: str) -> list[str]:
    return [MARK + word[0]] + list(word[1:]) if word else []


def _merge(syms: list[str], a: str, b: str) -> list[str]:
    out, i = [], 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def train_bpe(corpus: Iterable[str], target_size: int) -> SubwordVocab:
    """Greedy BPE: merge the most frequent adjacent pair until ``target_size`` pieces.

    Ties go to the lexicographically smallest merged string, so the result
    depends only on the multiset of words in the corpus.
    """
    words = Counter(w for text in corpus for w in normalize(text).split())
    if not words:
        raise DomainError("cannot train BPE on an empty corpus")
    chars = sorted({c for w in words for c in w})
    base = sorted(set(chars) | {MARK + c for c in chars})
    pieces = list(SUBWORD_SPECIALS) + base
    if target_size < len(pieces):
        raise DomainError(f"target_size {target_size} below base inventory {len(pieces)}")
    seqs = {w: _word_symbols(w) for w in words}
    merges: list[tuple[str, str]] = []
    known = set(pieces)
    while len(pieces) < target_size:
        pairs: Counter = Counter()
        for w, n in words.items():
            s = seqs[w]
            for a, b in zip(s, s[1:]):
                pairs[(a, b)] += n
        candidates = [(p, n) for p, n in pairs.items() if p[0] + p[1] not in known]
        if not candidates:
            break
        (a, b), _ = min(candidates, key=lambda pn: (-pn[1], pn[0][0] + pn[0][1], pn[0]))
        merges.append((a, b))
        pieces.append(a + b)
        known.add(a + b)
        seqs = {w: _merge(s, a, b) for w, s in seqs.items()}
    return SubwordVocab(pieces, merges)


def encode_subword(text: str, vocab: SubwordVocab) -> TokenSequence:
    ids = []
    for word in normalize(text).split():
        for piece in vocab.segment(word):
            ids.append(vocab.id_of.get(piece, vocab.unk_id))
    return TokenSequence(tuple(ids), "subword")


def encode_char(text: str, vocab: CharVocab) -> TokenSequence:
    return TokenSequence(tuple(vocab.id_of.get(c, vocab.unk_id) for c in text), "char")


def decode(seq: TokenSequence | Sequence[int], vocab: CharVocab | SubwordVocab) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else tuple(seq)
    table = vocab.symbols if isinstance(vocab, CharVocab) else vocab.pieces
    for i in ids:
        if not 0 <= i < len(table):
            raise ContractError(f"token id {i} outside vocabulary of size {len(table)}")
    if isinstance(vocab, CharVocab):
        return "".join(table[i] for i in ids if table[i] != UNK)
    out = []
    for i in ids:
        piece = table[i]
        if piece in SUBWORD_SPECIALS:
            continue
        if piece.startswith(MARK):
            if out:
                out.append(" ")
            piece = piece[1:]
        out.append(piece)
    return "".join(out)


class BpeTokenizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns merges, ``transform`` yields id lists."""

    def __init__(self, target_size: int = 200):
        self.target_size = target_size

    def fit(self, X: Sequence[str], y=None):
        self.vocab_ = train_bpe(X, self.target_size)
        return self

    def transform(self, X: Sequence[str]) -> list[list[int]]:
        check_is_fitted(self, "vocab_")
        return [list(encode_subword(x, self.vocab_).ids) for x in X]

    def inverse_transform(self, X: Sequence[Sequence[int]]) -> list[str]:
        check_is_fitted(self, "vocab_")
        return [decode(ids, self.vocab_) for ids in X]


def save_char_vocab(vocab: CharVocab, path) -> None:
    Path(path).write_text("\n".join(vocab.symbols) + "\n" + MERGES_HEADER + "\n", encoding="utf-8")


def load_char_vocab(path) -> CharVocab:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    return CharVocab(lines[:lines.index(MERGES_HEADER)])
