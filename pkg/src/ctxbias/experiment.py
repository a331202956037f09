"""Pipeline stages over a working directory.

Layout::

    config.ini
    data/       lexicon.txt train.tsv adapt.tsv test.tsv zs_test.tsv text.tsv rare_words.txt zero_shot_words.txt
    tokenizer/  subword.txt char.txt
    plm.ckpt base.ckpt adapters-<variant>.ckpt
    reports/    eval-<name>.tsv report.tsv report.txt
"""
from __future__ import annotations

import logging
import time
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as dt
from . import metrics as mt
from . import tokenize as tk
from .biasing import VARIANTS, BiasingAdapters, PlmEncoder, build_biasing_list
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .training import Example, train_adapters, train_base, train_plm
from .transducer import AudioFeatures, Transducer, greedy_decode

log = logging.getLogger(__name__)

BASE = "base"
DISTRACTOR_SUFFIX = ":distractors"


class PipelineError(RuntimeError):
    pass


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator per pipeline stage, all derived from the one seed."""
    return np.random.default_rng([seed, zlib.crc32(stage.encode("utf-8"))])


@dataclass
class Workdir:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def config(self) -> Path:
        return self.root / "config.ini"

    def data(self, name: str) -> Path:
        return self.root / "data" / name

    def tokenizer(self, name: str) -> Path:
        return self.root / "tokenizer" / name

    def checkpoint(self, name: str) -> Path:
        return self.root / f"{name}.ckpt"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise PipelineError(f"{path} is missing; run `{stage}` first")
        return path

    def ensure(self) -> None:
        for sub in ("data", "tokenizer", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)


def load_config(wd: Workdir, path=None) -> ExperimentConfig:
    """Explicit file, else the workdir's config.ini, else defaults."""
    if path is not None:
        return ExperimentConfig.from_ini(Path(path).read_text(encoding="utf-8"))
    if wd.config.exists():
        return ExperimentConfig.from_ini(wd.config.read_text(encoding="utf-8"))
    return ExperimentConfig()


# --- data and tokenizers --------------------------------------------------

def synth_data(cfg: ExperimentConfig, wd: Workdir) -> dict[str, int]:
    wd.ensure()
    wd.config.write_text(cfg.to_ini(), encoding="utf-8")
    d = cfg.data
    rng = stage_rng(cfg.seed, "synth-data")
    lexicon = dt.make_lexicon(d.lexicon_size, rng)
    gen = dict(min_words=d.min_words, max_words=d.max_words, zipf_exponent=d.zipf_exponent)
    corpus = dt.generate_corpus(d.n_utterances, lexicon, rng, prefix="utt", **gen)
    rare = dt.build_rare_word_list([u.transcript for u in corpus], d.top_n)
    train, zs_test, held = dt.make_zero_shot_split(corpus, rare, d.holdout_fraction, rng)
    if d.n_zero_shot_test:
        zs_test = zs_test[:d.n_zero_shot_test]
    test = [u for u in dt.generate_corpus(d.n_test, lexicon, rng, prefix="test", **gen)
            if not held.intersection(u.words)]
    text = [u for u in dt.generate_corpus(d.n_text, lexicon, rng, prefix="text", **gen)
            if not held.intersection(u.words)]
    dt.write_words(wd.data("lexicon.txt"), lexicon)
    dt.write_corpus(wd.data("train.tsv"), train)
    n_adapt = int(d.adapter_fraction * len(train))
    adapt = [train[i] for i in sorted(rng.choice(len(train), size=n_adapt, replace=False))]
    dt.write_corpus(wd.data("adapt.tsv"), adapt)
    dt.write_corpus(wd.data("test.tsv"), test)
    dt.write_corpus(wd.data("zs_test.tsv"), zs_test)
    dt.write_corpus(wd.data("text.tsv"), text)
    dt.write_words(wd.data("rare_words.txt"), [w for w in rare if w not in held])
    dt.write_words(wd.data("zero_shot_words.txt"), sorted(held))
    return {"train": len(train), "adapt": len(adapt), "test": len(test), "zs_test": len(zs_test), "text": len(text),
            "rare": len(rare) - len(held), "zero_shot": len(held)}


def train_tokenizers(cfg: ExperimentConfig, wd: Workdir) -> int:
    wd.ensure()
    train = dt.read_corpus(wd.require(wd.data("train.tsv"), "synth-data"))
    vocab = tk.train_bpe([u.transcript for u in train], cfg.tokenizer.subword_size)
    vocab.save(wd.tokenizer("subword.txt"))
    tk.save_char_vocab(tk.CharVocab.default(), wd.tokenizer("char.txt"))
    return len(vocab)


def load_tokenizers(wd: Workdir) -> tuple[tk.CharVocab, tk.SubwordVocab]:
    sub = tk.SubwordVocab.load(wd.require(wd.tokenizer("subword.txt"), "tokenizer-train"))
    return tk.load_char_vocab(wd.tokenizer("char.txt")), sub


# --- model construction ---------------------------------------------------

def feature_dim(cfg: ExperimentConfig) -> int:
    return cfg.data.feature_dim * (cfg.data.stack_left + 1)


def build_transducer(cfg: ExperimentConfig, sub: tk.SubwordVocab) -> Transducer:
    m = cfg.model
    return Transducer(feature_dim(cfg), len(sub), stage_rng(cfg.seed, "init-base"),
                      blank_id=sub.blank_id, bos_id=sub.bos_id, enc_hidden=m.enc_hidden,
                      enc_layers=m.enc_layers, pred_embed=m.pred_embed, pred_hidden=m.pred_hidden,
                      model_dim=m.model_dim, joint_hidden=m.joint_hidden)


def build_plm(cfg: ExperimentConfig, sub: tk.SubwordVocab) -> PlmEncoder:
    m = cfg.model
    return PlmEncoder(len(sub), stage_rng(cfg.seed, "init-plm"), bos_id=sub.bos_id,
                      embed_dim=m.plm_embed, hidden=m.plm_hidden, layers=m.plm_layers)


def build_adapters(cfg: ExperimentConfig, variant: str, char: tk.CharVocab, sub: tk.SubwordVocab,
                   plm: PlmEncoder | None) -> BiasingAdapters:
    m = cfg.model
    return BiasingAdapters(VARIANTS[variant], len(char), len(sub), m.model_dim,
                           stage_rng(cfg.seed, f"init-adapters-{variant}"), plm=plm,
                           embed_dim=m.context_embed, context_hidden=m.context_hidden,
                           attn_dim=m.attn_dim, heads=m.heads)


def synthetic_spec(cfg: ExperimentConfig) -> dt.SyntheticSpec:
    d = cfg.data
    return dt.SyntheticSpec(frames_per_char=d.frames_per_char, feature_dim=d.feature_dim,
                            noise_std=d.noise_std, seed=cfg.seed)


def make_examples(cfg: ExperimentConfig, utts: Sequence[dt.Utterance], sub: tk.SubwordVocab) -> list[Example]:
    spec = synthetic_spec(cfg)
    return [Example(u.features(spec, cfg.seed, cfg.data.stack_left, cfg.data.downsample).frames,
                    list(tk.encode_subword(u.transcript, sub).ids), u.transcript) for u in utts]


def _save(cfg: ExperimentConfig, path: Path, parts: Sequence[tuple[object, str]]) -> Checkpoint:
    ckpt = Checkpoint(config=cfg.to_ini())
    for module, tag in parts:
        ckpt.add_module(module, tag)
    save_checkpoint(ckpt, path)
    return ckpt


# --- training stages ------------------------------------------------------

def run_plm_train(cfg: ExperimentConfig, wd: Workdir) -> list[float]:
    _, sub = load_tokenizers(wd)
    text = dt.read_corpus(wd.require(wd.data("text.tsv"), "synth-data"))
    seqs = [list(tk.encode_subword(u.transcript, sub).ids) for u in text]
    n_held = max(1, len(seqs) // 20)
    plm = build_plm(cfg, sub)
    t = cfg.train
    history = train_plm(plm, seqs[n_held:], seqs[:n_held], epochs=t.plm_epochs, lr=t.plm_lr,
                        batch_size=t.batch_size, rng=stage_rng(cfg.seed, "train-plm"))
    _save(cfg, wd.checkpoint("plm"), [(plm, "plm")])
    return history


def base_and_adapter_split(wd: Workdir) -> tuple[list[dt.Utterance], list[dt.Utterance]]:
    """Training utterances for the base model and the disjoint slice reserved for adapters.

    Without a reserved slice the adapters train on the full training set.
    """
    train = dt.read_corpus(wd.require(wd.data("train.tsv"), "synth-data"))
    adapt = dt.read_corpus(wd.require(wd.data("adapt.tsv"), "synth-data"))
    if not adapt:
        return train, train
    held = {u.utt_id for u in adapt}
    return [u for u in train if u.utt_id not in held], adapt


def run_train_base(cfg: ExperimentConfig, wd: Workdir) -> list[float]:
    _, sub = load_tokenizers(wd)
    train, _ = base_and_adapter_split(wd)
    model = build_transducer(cfg, sub)
    t = cfg.train
    history = train_base(model, make_examples(cfg, train, sub), epochs=t.base_epochs, lr=t.base_lr,
                         batch_size=t.batch_size, rng=stage_rng(cfg.seed, "train-base"))
    _save(cfg, wd.checkpoint("base"), [(model, "base")])
    return history


def load_base(cfg: ExperimentConfig, wd: Workdir, sub: tk.SubwordVocab) -> Transducer:
    model = build_transducer(cfg, sub)
    load_checkpoint(wd.require(wd.checkpoint("base"), "train-base")).load_into(model, "base")
    return model


def load_plm(cfg: ExperimentConfig, wd: Workdir, sub: tk.SubwordVocab) -> PlmEncoder:
    plm = build_plm(cfg, sub)
    load_checkpoint(wd.require(wd.checkpoint("plm"), "plm-train")).load_into(plm, "plm")
    return plm


def _snapshot(modules) -> list[bytes]:
    return [p.data.tobytes() for m in modules if m is not None for p in m.parameters()]


def run_train_adapters(cfg: ExperimentConfig, wd: Workdir, variant: str) -> list[float]:
    if variant not in VARIANTS:
        raise PipelineError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    char, sub = load_tokenizers(wd)
    model = load_base(cfg, wd, sub)
    plm = load_plm(cfg, wd, sub) if VARIANTS[variant].uses_plm else None
    adapters = build_adapters(cfg, variant, char, sub, plm)
    _, train = base_and_adapter_split(wd)
    pool = dt.read_words(wd.require(wd.data("rare_words.txt"), "synth-data"))
    rng = stage_rng(cfg.seed, f"train-adapters-{variant}")
    mixed = dt.mixed_sample(train, pool, cfg.train.n_mixed, rng)
    examples = make_examples(cfg, mixed, sub)
    k = cfg.train.train_k

    def make_list(ex: Example, list_rng: np.random.Generator):
        return build_biasing_list(ex.transcript, pool, k, list_rng, char, sub, mode="train")

    before = _snapshot([model, plm])
    t = cfg.train
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        history = train_adapters(model, adapters, examples, make_list, epochs=t.adapter_epochs,
                                 lr=t.adapter_lr, batch_size=t.batch_size, rng=rng,
                                 max_steps=t.adapter_max_steps or None)
    if _snapshot([model, plm]) != before:
        raise PipelineError("base or language-model parameters changed during adapter training")
    parts = [(model, "base"), (adapters, "adapter")] + ([(plm, "plm")] if plm is not None else [])
    _save(cfg, wd.checkpoint(f"adapters-{variant}"), parts)
    return history


def load_variant(cfg: ExperimentConfig, wd: Workdir, variant: str, char: tk.CharVocab,
                 sub: tk.SubwordVocab) -> tuple[Transducer, BiasingAdapters | None]:
    if variant == BASE:
        return load_base(cfg, wd, sub), None
    ckpt = load_checkpoint(wd.require(wd.checkpoint(f"adapters-{variant}"), f"train-adapters --variant {variant}"))
    model = build_transducer(cfg, sub)
    ckpt.load_into(model, "base")
    plm = None
    if VARIANTS[variant].uses_plm:
        plm = build_plm(cfg, sub)
        ckpt.load_into(plm, "plm")
    adapters = build_adapters(cfg, variant, char, sub, plm)
    ckpt.load_into(adapters, "adapter")
    return model, adapters


# --- evaluation -----------------------------------------------------------

@dataclass
class EvalSet:
    utterances: list[dt.Utterance]
    examples: list[Example]
    word_class: dict[str, str]
    pool: list[str]


def load_eval_set(cfg: ExperimentConfig, wd: Workdir, sub: tk.SubwordVocab) -> EvalSet:
    """In-domain and zero-shot test utterances with word classes.

    Non-rare words are the training top-N; rare words absent from training
    are zero-shot. Distractors come from every non-top-N lexicon word.
    """
    train = dt.read_corpus(wd.require(wd.data("train.tsv"), "synth-data"))
    utts = dt.read_corpus(wd.data("test.tsv")) + dt.read_corpus(wd.data("zs_test.tsv"))
    top = {w for w, _ in dt.word_ranking(u.transcript for u in train)[:cfg.data.top_n]}
    seen = {w for u in train for w in u.words}
    lexicon = dt.read_words(wd.data("lexicon.txt"))
    word_class = {}
    for w in set(lexicon) | {w for u in utts for w in u.words}:
        word_class[w] = mt.NON_RARE if w in top else (mt.RARE if w in seen else mt.ZERO_SHOT)
    pool = [w for w in lexicon if w not in top]
    return EvalSet(utts, make_examples(cfg, utts, sub), word_class, pool)


def evaluate_variant(cfg: ExperimentConfig, model: Transducer, adapters: BiasingAdapters | None,
                     name: str, es: EvalSet, K: int, char: tk.CharVocab, sub: tk.SubwordVocab,
                     include_correct: bool = True) -> tuple[mt.MetricsReport, list[str]]:
    """Greedy-decode the eval set with K-entry lists; returns the report and hypotheses.

    Lists depend only on (seed, K, include_correct), so every variant sees
    the same lists. Attention metrics use the prediction-side scores when
    that adapter exists and the per-frame encoder scores otherwise.
    """
    rng = stage_rng(cfg.seed, f"eval-lists-{K}-{int(include_correct)}")
    alignments, hyps, records, correct = [], [], [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lists = [build_biasing_list(u.transcript, es.pool, K, rng, char, sub, mode="eval",
                                    include_correct=include_correct) for u in es.utterances]
    for ex, blist in zip(es.examples, lists):
        hooks = adapters.decoder_hooks(blist) if adapters is not None else None
        hyp = greedy_decode(model, AudioFeatures(ex.frames), hooks, cfg.eval.max_symbols_per_frame)
        text = tk.decode(hyp.tokens, sub)
        hyps.append(text)
        alignments.append(mt.align(ex.transcript.split(), text.split()))
        if hooks is not None:
            rec = np.array(hyp.attention) if adapters.pnba is not None else hooks.encoder_scores
            records.append(rec if rec is not None and len(rec) else np.zeros((0, blist.K + 1)))
            correct.append(blist.correct_index)
    attention = None
    if adapters is not None and any(c is not None for c in correct):
        attention = mt.attention_metrics(records, correct)
    return mt.build_report(name, K, alignments, es.word_class, attention), hyps


def run_evaluate(cfg: ExperimentConfig, wd: Workdir, variants: Sequence[str], k_list: Sequence[int],
                 distractor_only: bool = False) -> list[mt.MetricsReport]:
    wd.ensure()
    char, sub = load_tokenizers(wd)
    es = load_eval_set(cfg, wd, sub)
    reports = []
    for variant in variants:
        model, adapters = load_variant(cfg, wd, variant, char, sub)
        name = variant + (DISTRACTOR_SUFFIX if distractor_only else "")
        rows = []
        for K in k_list:
            t0 = time.perf_counter()
            rep, _ = evaluate_variant(cfg, model, adapters, name, es, K, char, sub,
                                      include_correct=not distractor_only)
            log.info("%s K=%d wer %.4f (%.1fs)", name, K, rep.wer, time.perf_counter() - t0)
            rows.append(rep)
        wd.report(f"eval-{name.replace(':', '.')}.tsv").write_text(mt.reports_tsv(rows), encoding="utf-8")
        reports.extend(rows)
    return reports


def run_report(wd: Workdir) -> str:
    """Merge every eval TSV, fill WERR against the base rows, write TSV and grid."""
    files = sorted(wd.report("").glob("eval-*.tsv"))
    if not files:
        raise PipelineError("no evaluation results; run `evaluate` first")
    rows = [r for f in files for r in mt.parse_reports_tsv(f.read_text(encoding="utf-8"))]
    base_wer = {r["K"]: float(r["wer"]) for r in rows if r["variant"] == BASE}
    order = {BASE: 0}
    rows.sort(key=lambda r: (order.get(r["variant"], 1), r["variant"], int(r["K"])))
    for r in rows:
        if r["variant"] != BASE and r["K"] in base_wer and base_wer[r["K"]] > 0:
            r["werr"] = f"{mt.werr(base_wer[r['K']], float(r['wer'])):.6f}"
    header = list(mt.MetricsReport.COLUMNS)
    tsv = "\n".join(["\t".join(header)] + ["\t".join(r[c] for c in header) for r in rows]) + "\n"
    wd.report("report.tsv").write_text(tsv, encoding="utf-8")
    grid = mt.format_grid(rows, "wer")
    wd.report("report.txt").write_text(grid, encoding="utf-8")
    return grid
