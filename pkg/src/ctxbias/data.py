"""Synthetic speech-like corpora, rare-word lists and frame preprocessing.

Features are built from per-character templates, so words that share
characters share frames; that is what character-level keys can exploit.
"""
from __future__ import annotations

import math
import string
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .numerics import DomainError
from .tokenize import normalize
from .transducer import AudioFeatures

SILENCE = " "


@dataclass
class SyntheticSpec:
    alphabet: str = string.ascii_lowercase + "'"
    frames_per_char: int = 4
    feature_dim: int = 16
    noise_std: float = 0.1
    seed: int = 0
    char_templates: dict[str, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 7919])
        symbols = list(self.alphabet) + [SILENCE]
        while True:
            vecs = rng.normal(size=(len(symbols), self.feature_dim))
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            dist = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1)
            if dist[np.triu_indices(len(symbols), 1)].min() > 0.1:
                break
        self.char_templates = {c: vecs[i] for i, c in enumerate(symbols)}


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8"))])


def synthesize_features(transcript: str, spec: SyntheticSpec, rng: np.random.Generator,
                        utt_id: str = "") -> AudioFeatures:
    """``frames_per_char`` noisy template frames per character, one silence frame between words."""
    words = normalize(transcript).split()
    if not words:
        raise DomainError("cannot synthesize features for an empty transcript")
    rows = []
    for i, word in enumerate(words):
        if i:
            rows.append(spec.char_templates[SILENCE])
        for c in word:
            if c not in spec.alphabet:
                raise DomainError(f"character {c!r} outside the synthetic alphabet")
            rows.extend([spec.char_templates[c]] * spec.frames_per_char)
    frames = np.array(rows)
    if spec.noise_std > 0:
        frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
    return AudioFeatures(frames, utt_id)


def stack_and_downsample(features: AudioFeatures, left: int = 2, factor: int = 3) -> AudioFeatures:
    """Append the ``left`` previous frames (zero-padded) to each frame, keep every ``factor``-th."""
    if left < 0 or factor < 1:
        raise DomainError("need left >= 0 and factor >= 1")
    x = features.frames
    if x.shape[0] == 0:
        raise DomainError("cannot stack empty features")
    T, F = x.shape
    padded = np.vstack([np.zeros((left, F)), x])
    stacked = np.hstack([padded[j:j + T] for j in range(left + 1)])
    return AudioFeatures(stacked[::factor], features.utt_id)


class FrameStacker(TransformerMixin, BaseEstimator):
    """Stateless transformer form of :func:`stack_and_downsample` over feature lists."""

    def __init__(self, left: int = 2, factor: int = 3):
        self.left = left
        self.factor = factor

    def fit(self, X, y=None):
        return self

    def transform(self, X: Sequence[AudioFeatures]) -> list[AudioFeatures]:
        return [stack_and_downsample(f, self.left, self.factor) for f in X]


@dataclass
class Utterance:
    utt_id: str
    transcript: str

    def features(self, spec: SyntheticSpec, seed: int, left: int = 2, factor: int = 3) -> AudioFeatures:
        raw = synthesize_features(self.transcript, spec, utterance_rng(seed, self.utt_id), self.utt_id)
        return stack_and_downsample(raw, left, factor)

    @property
    def words(self) -> list[str]:
        return self.transcript.split()


@dataclass
class RareWordList:
    words: list[str]
    top_n_removed: int

    def __post_init__(self):
        self._set = set(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._set

    def __len__(self) -> int:
        return len(self.words)

    def __iter__(self):
        return iter(self.words)


def word_ranking(transcripts: Iterable[str]) -> list[tuple[str, int]]:
    counts = Counter(w for t in transcripts for w in normalize(t).split())
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def build_rare_word_list(transcripts: Iterable[str], top_n: int) -> RareWordList:
    """Every word outside the ``top_n`` most frequent ones (ties broken alphabetically)."""
    if top_n < 0:
        raise DomainError("top_n must be non-negative")
    ranking = word_ranking(transcripts)
    if not ranking:
        raise DomainError("cannot build a rare-word list from an empty corpus")
    return RareWordList([w for w, _ in ranking[top_n:]], top_n)


def make_zero_shot_split(corpus: Sequence[Utterance], rare: RareWordList | Sequence[str],
                         holdout_fraction: float, rng: np.random.Generator):
    """Hold out a random subset of rare words together with every utterance using them.

    Returns (train utterances, zero-shot test utterances, held-out word set).
    """
    if not 0 < holdout_fraction < 1:
        raise DomainError("holdout_fraction must lie strictly between 0 and 1")
    words = list(rare)
    n = int(math.floor(holdout_fraction * len(words)))
    picks = sorted(rng.choice(len(words), size=n, replace=False)) if n else []
    held = {words[i] for i in picks}
    train = [u for u in corpus if not held.intersection(u.words)]
    test = [u for u in corpus if held.intersection(u.words)]
    if not train:
        raise DomainError("zero-shot split leaves no training utterances")
    seen = {w for u in train for w in u.words}
    assert not held & seen
    return train, test, held


# --- corpus generation ----------------------------------------------------

_ONSETS = list("bcdfghjklmnprstvwz") + ["ch", "sh", "th", "br", "st", "pl", "tr", "gr"]
_VOWELS = list("aeiou") + ["ea", "oo", "ai"]
_CODAS = [""] * 6 + list("nrtslmkd") + ["ng", "st"]


def make_lexicon(size: int, rng: np.random.Generator) -> list[str]:
    """``size`` distinct pronounceable pseudo-words of one to three syllables."""
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < size:
        syll = rng.choice([1, 2, 2, 3], p=[0.3, 0.3, 0.2, 0.2])
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(syll))
        if 3 <= len(w) <= 10 and w not in seen:
            seen.add(w)
            words.append(w)
    return words


def zipf_weights(n: int, exponent: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate_corpus(n_utts: int, lexicon: Sequence[str], rng: np.random.Generator, *,
                    min_words: int = 2, max_words: int = 6, zipf_exponent: float = 1.0,
                    prefix: str = "utt") -> list[Utterance]:
    p = zipf_weights(len(lexicon), zipf_exponent)
    out = []
    for i in range(n_utts):
        n = int(rng.integers(min_words, max_words + 1))
        words = [lexicon[j] for j in rng.choice(len(lexicon), size=n, p=p)]
        out.append(Utterance(f"{prefix}{i:05d}", " ".join(words)))
    return out


def mixed_sample(corpus: Sequence[Utterance], rare: Iterable[str], n: int,
                 rng: np.random.Generator) -> list[Utterance]:
    """Half utterances with rare words, half general ones (sampled with replacement)."""
    rare = set(rare)
    with_rare = [u for u in corpus if rare.intersection(u.words)]
    general = [u for u in corpus if not rare.intersection(u.words)]
    if not with_rare or not general:
        return [corpus[i] for i in rng.choice(len(corpus), size=n)]
    out = []
    for _ in range(n):
        pool = with_rare if rng.random() < 0.5 else general
        out.append(pool[int(rng.integers(len(pool)))])
    return out


# --- file formats ---------------------------------------------------------

def write_corpus(path, corpus: Iterable[Utterance]) -> None:
    Path(path).write_text("".join(f"{u.utt_id}\t{u.transcript}\n" for u in corpus), encoding="utf-8")


def read_corpus(path) -> list[Utterance]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected 'id<TAB>transcript'")
        out.append(Utterance(parts[0], normalize(parts[1])))
    return out


def write_words(path, words: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{w}\n" for w in words), encoding="utf-8")


def read_words(path) -> list[str]:
    return [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines() if w.strip()]
