"""Word error rates with rare-word attribution, WERR and attention metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .numerics import DomainError

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"
RARE, NON_RARE, ZERO_SHOT = "rare", "non-rare", "zero-shot-rare"


@dataclass
class WordAlignment:
    ref: list[str]
    hyp: list[str]
    ops: list[tuple[str, int | None, int | None]]  # (op, ref index, hyp index)

    @property
    def counts(self) -> dict[str, int]:
        out = {MATCH: 0, SUB: 0, DEL: 0, INS: 0}
        for op, _, _ in self.ops:
            out[op] += 1
        return out

    @property
    def errors(self) -> int:
        c = self.counts
        return c[SUB] + c[DEL] + c[INS]


def _table(ref: Sequence[str], hyp: Sequence[str]) -> list[list[int]]:
    prev = list(range(len(hyp) + 1))
    rows = [prev]
    for i, r in enumerate(ref, start=1):
        row = [i]
        for j, h in enumerate(hyp, start=1):
            row.append(min(prev[j - 1] + (r != h), prev[j] + 1, row[j - 1] + 1))
        rows.append(row)
        prev = row
    return rows


def edit_distance_table(ref: Sequence[str], hyp: Sequence[str]) -> np.ndarray:
    return np.array(_table(ref, hyp), dtype=np.int64)


def align(ref: Sequence[str], hyp: Sequence[str]) -> WordAlignment:
    """Minimal edit alignment; ties prefer match, then substitution, deletion, insertion."""
    ref, hyp = list(ref), list(hyp)
    d = _table(ref, hyp)
    i, j, ops = len(ref), len(hyp), []
    while i or j:
        if i and j and ref[i - 1] == hyp[j - 1] and d[i][j] == d[i - 1][j - 1]:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and j and d[i][j] == d[i - 1][j - 1] + 1:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    ops.reverse()
    return WordAlignment(ref, hyp, ops)


def wer(alignments: WordAlignment | Sequence[WordAlignment]) -> float:
    """Corpus WER: total errors over total reference words."""
    if isinstance(alignments, WordAlignment):
        alignments = [alignments]
    n_ref = sum(len(a.ref) for a in alignments)
    if n_ref == 0:
        raise DomainError("WER undefined without reference words")
    return sum(a.errors for a in alignments) / n_ref


@dataclass
class ClassCounts:
    errors: dict[str, int] = field(default_factory=lambda: {RARE: 0, NON_RARE: 0, ZERO_SHOT: 0})
    words: dict[str, int] = field(default_factory=lambda: {RARE: 0, NON_RARE: 0, ZERO_SHOT: 0})

    def rate(self, cls: str) -> float | None:
        return self.errors[cls] / self.words[cls] if self.words[cls] else None


def class_counts(alignments: WordAlignment | Sequence[WordAlignment],
                 word_class: Mapping[str, str] | Callable[[str], str]) -> ClassCounts:
    """Attribute errors to reference-word classes.

    Substitutions and deletions belong to their reference word; an insertion
    belongs to the closest preceding reference word (non-rare at sentence
    start). Zero-shot-rare words are counted under rare as well.
    """
    if isinstance(alignments, WordAlignment):
        alignments = [alignments]
    cls_of = word_class if callable(word_class) else (lambda w: word_class.get(w, NON_RARE))
    out = ClassCounts()

    def add(bucket: dict, cls: str):
        bucket[NON_RARE if cls == NON_RARE else RARE] += 1
        if cls == ZERO_SHOT:
            bucket[ZERO_SHOT] += 1

    for a in alignments:
        prev = NON_RARE
        for w in a.ref:
            add(out.words, cls_of(w))
        for op, i, _ in a.ops:
            if i is not None:
                prev = cls_of(a.ref[i])
            if op in (SUB, DEL):
                add(out.errors, cls_of(a.ref[i]))
            elif op == INS:
                add(out.errors, prev)
    return out


def classed_wer(alignments, word_class) -> tuple[float | None, float | None, float | None]:
    """(R-WER, NR-WER, ZSR-WER); a class with no reference words yields None."""
    c = class_counts(alignments, word_class)
    return c.rate(RARE), c.rate(NON_RARE), c.rate(ZERO_SHOT)


def werr(wer_baseline: float, wer_model: float) -> float:
    """Relative WER reduction of a model against a baseline."""
    if wer_baseline == 0:
        raise DomainError("WERR undefined for a zero baseline WER")
    return (wer_baseline - wer_model) / wer_baseline


def attention_metrics(records: Sequence[np.ndarray],
                      correct_index: Sequence[int | None]) -> tuple[float, float]:
    """Attention accuracy and average attention score on the correct entity.

    Each record is a (steps, K+1) score matrix; per utterance the scores are
    averaged over steps. Utterances without a correct entity are skipped;
    ties go to the lower index, so a tie with ``<no-bias>`` is a miss. An
    utterance decoded with no steps scores zero.
    """
    hits, mass, n = 0, 0.0, 0
    for rec, k in zip(records, correct_index):
        if k is None:
            continue
        rec = np.asarray(rec, dtype=np.float64)
        n += 1
        if rec.size == 0:
            continue
        per_entity = rec.reshape(-1, rec.shape[-1]).mean(axis=0)
        hits += int(np.argmax(per_entity) == k)
        mass += float(per_entity[k])
    if n == 0:
        raise DomainError("no utterances with a correct entity")
    return hits / n, mass / n


def relative_change(new: float, base: float) -> float:
    """Signed relative change, the presentation used for AA/AAS comparisons."""
    if base == 0:
        raise DomainError("relative change undefined for a zero base")
    return (new - base) / base


@dataclass
class MetricsReport:
    variant: str
    K: int
    wer: float
    r_wer: float | None
    nr_wer: float | None
    zsr_wer: float | None
    counts: ClassCounts
    n_errors: int
    n_words: int
    werr: float | None = None
    baseline: str | None = None
    aa: float | None = None
    aas: float | None = None

    def __post_init__(self):
        c = self.counts
        assert c.words[RARE] + c.words[NON_RARE] == self.n_words
        assert c.errors[RARE] + c.errors[NON_RARE] == self.n_errors

    COLUMNS = ("variant", "K", "wer", "r_wer", "nr_wer", "zsr_wer", "werr", "aa", "aas",
               "errors", "words", "rare_errors", "rare_words", "zs_errors", "zs_words")

    def row(self) -> list[str]:
        def f(x):
            return "-" if x is None else f"{x:.6f}"
        c = self.counts
        return [self.variant, str(self.K), f(self.wer), f(self.r_wer), f(self.nr_wer), f(self.zsr_wer),
                f(self.werr), f(self.aa), f(self.aas), str(self.n_errors), str(self.n_words),
                str(c.errors[RARE]), str(c.words[RARE]), str(c.errors[ZERO_SHOT]), str(c.words[ZERO_SHOT])]


def build_report(variant: str, K: int, alignments: Sequence[WordAlignment], word_class,
                 attention: tuple[float, float] | None = None) -> MetricsReport:
    c = class_counts(alignments, word_class)
    n_words = sum(len(a.ref) for a in alignments)
    n_err = sum(a.errors for a in alignments)
    aa, aas = attention if attention is not None else (None, None)
    return MetricsReport(variant, K, wer(alignments), c.rate(RARE), c.rate(NON_RARE), c.rate(ZERO_SHOT),
                         c, n_err, n_words, aa=aa, aas=aas)


def reports_tsv(reports: Sequence[MetricsReport]) -> str:
    lines = ["\t".join(MetricsReport.COLUMNS)] + ["\t".join(r.row()) for r in reports]
    return "\n".join(lines) + "\n"


def parse_reports_tsv(text: str) -> list[dict[str, str]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]


def format_grid(rows: Sequence[Mapping[str, str]], metric: str = "wer") -> str:
    """Variant rows by K columns of ``metric`` in percent, plus rare-word columns at the largest K."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    ks = sorted({int(r["K"]) for r in rows})
    cell = {(r["variant"], int(r["K"])): r for r in rows}

    def pct(x):
        return "-" if x in (None, "-") else f"{100 * float(x):.2f}"

    header = ["Model"] + [f"K={k}" for k in ks] + ["R-WER", "NR-WER", "ZSR-WER", "AA", "AAS"]
    body = []
    for v in variants:
        last = cell.get((v, ks[-1]), {})
        body.append([v] + [pct(cell.get((v, k), {}).get(metric)) for k in ks]
                    + [pct(last.get(m)) for m in ("r_wer", "nr_wer", "zsr_wer", "aa", "aas")])
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(x).rjust(w) if i else str(x).ljust(w)  # noqa: E731
                               for i, (x, w) in enumerate(zip(r, widths)))
    sep = "-" * len(fmt(header))
    return "\n".join([fmt(header), sep] + [fmt(r) for r in body]) + "\n"
