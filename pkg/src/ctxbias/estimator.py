"""scikit-learn style wrapper around the two-phase biased transducer."""
from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import data as dt
from . import metrics as mt
from . import tokenize as tk
from .biasing import VARIANTS, BiasingList, build_biasing_list
from .config import DataConfig, ExperimentConfig, ExperimentSection, ModelConfig, TokenizerConfig, TrainConfig
from .experiment import build_adapters, build_plm, build_transducer, stage_rng
from .training import Example, train_adapters, train_base, train_plm
from .transducer import AudioFeatures, greedy_decode


def _frames(x) -> np.ndarray:
    arr = x.frames if isinstance(x, AudioFeatures) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"each input must be a non-empty (T, F) array, got shape {arr.shape}")
    return arr


class ContextualTransducer(BaseEstimator):
    """Transducer ASR with optional contextual biasing.

    ``fit`` trains a subword vocabulary, the base transducer, then (unless
    ``variant`` is None) the biasing adapters with the base frozen. Inputs
    are (T, F) feature arrays, already stacked and downsampled; targets are
    transcripts. ``predict`` takes one list of bias phrases per utterance.
    """

    def __init__(self, variant: str | None = "Char-II", subword_size: int = 120, top_n: int = 50,
                 base_epochs: int = 12, base_lr: float = 5e-4, adapter_epochs: int = 4,
                 adapter_lr: float = 5e-4, plm_epochs: int = 3, batch_size: int = 8, train_k: int = 50,
                 model_dim: int = 64, enc_hidden: int = 64, random_state: int = 0):
        self.variant = variant
        self.subword_size = subword_size
        self.top_n = top_n
        self.base_epochs = base_epochs
        self.base_lr = base_lr
        self.adapter_epochs = adapter_epochs
        self.adapter_lr = adapter_lr
        self.plm_epochs = plm_epochs
        self.batch_size = batch_size
        self.train_k = train_k
        self.model_dim = model_dim
        self.enc_hidden = enc_hidden
        self.random_state = random_state

    def _config(self, feat_dim: int) -> ExperimentConfig:
        data = DataConfig(feature_dim=feat_dim, stack_left=0)  # inputs arrive already stacked
        return ExperimentConfig(
            experiment=ExperimentSection(seed=self.random_state,
                                         variants=[self.variant] if self.variant else []),
            data=data, tokenizer=TokenizerConfig(self.subword_size),
            model=ModelConfig(model_dim=self.model_dim, enc_hidden=self.enc_hidden),
            train=TrainConfig(base_lr=self.base_lr, base_epochs=self.base_epochs,
                              adapter_lr=self.adapter_lr, adapter_epochs=self.adapter_epochs,
                              plm_epochs=self.plm_epochs, batch_size=self.batch_size,
                              train_k=self.train_k))

    def fit(self, X: Sequence, y: Sequence[str]):
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        frames = [_frames(x) for x in X]
        texts = [tk.normalize(t) for t in y]
        if len(frames) != len(texts) or not frames:
            raise ValueError("X and y must be non-empty and of equal length")
        cfg = self._config(frames[0].shape[1])
        self.config_ = cfg
        self.char_vocab_ = tk.CharVocab.default()
        self.sub_vocab_ = tk.train_bpe(texts, self.subword_size)
        examples = [Example(f, list(tk.encode_subword(t, self.sub_vocab_).ids), t) for f, t in zip(frames, texts)]
        self.model_ = build_transducer(cfg, self.sub_vocab_)
        self.base_loss_ = train_base(self.model_, examples, epochs=self.base_epochs, lr=self.base_lr,
                                     batch_size=self.batch_size, rng=stage_rng(cfg.seed, "train-base"))
        self.rare_words_ = dt.build_rare_word_list(texts, self.top_n).words
        self.adapters_ = None
        if self.variant is None:
            return self
        plm = None
        if VARIANTS[self.variant].uses_plm:
            plm = build_plm(cfg, self.sub_vocab_)
            seqs = [e.target for e in examples]
            train_plm(plm, seqs, seqs[:max(1, len(seqs) // 20)], epochs=self.plm_epochs, lr=3e-3,
                      batch_size=self.batch_size, rng=stage_rng(cfg.seed, "train-plm"))
        self.adapters_ = build_adapters(cfg, self.variant, self.char_vocab_, self.sub_vocab_, plm)
        pool = self.rare_words_

        def make_list(ex, rng):
            return build_biasing_list(ex.transcript, pool, self.train_k, rng, self.char_vocab_, self.sub_vocab_)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.adapter_loss_ = train_adapters(
                self.model_, self.adapters_, examples, make_list, epochs=self.adapter_epochs,
                lr=self.adapter_lr, batch_size=self.batch_size,
                rng=stage_rng(cfg.seed, f"train-adapters-{self.variant}"))
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def predict(self, X: Sequence, biasing_lists: Sequence[Sequence[str]] | None = None) -> list[str]:
        self._check_fitted()
        if biasing_lists is not None and len(biasing_lists) != len(X):
            raise ValueError("need one biasing list per utterance")
        out = []
        for i, x in enumerate(X):
            hooks = None
            if self.adapters_ is not None and biasing_lists is not None:
                blist = BiasingList.from_texts(list(biasing_lists[i]), self.char_vocab_, self.sub_vocab_)
                hooks = self.adapters_.decoder_hooks(blist)
            hyp = greedy_decode(self.model_, AudioFeatures(_frames(x)), hooks)
            out.append(tk.decode(hyp.tokens, self.sub_vocab_))
        return out

    def score(self, X: Sequence, y: Sequence[str], biasing_lists=None) -> float:
        """One minus corpus WER."""
        hyps = self.predict(X, biasing_lists)
        return 1.0 - mt.wer([mt.align(tk.normalize(r).split(), h.split()) for r, h in zip(y, hyps)])
