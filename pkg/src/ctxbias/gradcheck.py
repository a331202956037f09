"""Finite-difference checks of every differentiable building block."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import numerics as nx
from .biasing import VARIANTS, BiasingAdapters, BiasingList, PlmEncoder, biased_loss
from .nnet import AttentionParams, BiLstmEncoder, Embedding, FeedForward, LstmLayer, scaled_dot_attention
from .numerics import Tensor
from .tokenize import CharVocab, SubwordVocab
from .transducer import Transducer

# Whole-model losses have coordinates with gradients near 1e-8; a wider step
# keeps their central differences above roundoff.
MODEL_EPS = 1e-3


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random projection to a scalar so every output coordinate matters."""
    return nx.total(nx.mul(out, Tensor(rng.normal(size=out.shape))))


def layer_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    emb = Embedding(7, 4, rng)
    ids = [1, 3, 3, 6]
    ffn = FeedForward([5, 6, 3], rng)
    x5 = Tensor(rng.normal(size=(4, 5)))
    lstm = LstmLayer(3, 4, rng)
    seq = Tensor(rng.normal(size=(5, 3)))
    batch = Tensor(rng.normal(size=(2, 4, 3)))
    bi = BiLstmEncoder(3, 3, rng)
    seqs = [Tensor(rng.normal(size=(n, 3))) for n in (2, 4, 2)]
    att = AttentionParams(5, 4, 3, rng, attn_dim=4, out_dim=6, heads=2, zero_value=False)
    q, k, v = (Tensor(rng.normal(size=s)) for s in ((3, 5), (4, 4), (4, 3)))
    w = {name: rng.normal(size=shape) for name, shape in
         (("emb", (4, 4)), ("ffn", (4, 3)), ("lstm", (5, 4)), ("lstmb", (2, 4, 4)), ("bi", (3, 6)),
          ("att", (3, 6)), ("scores", (3, 4)))}

    def proj(out: Tensor, key: str) -> Tensor:
        return nx.total(nx.mul(out, Tensor(w[key])))

    def attention_loss():
        ctx, sc = scaled_dot_attention(q, k, v, att)
        return proj(ctx, "att") + proj(sc, "scores")

    return {
        "embedding": lambda: nx.finite_diff_check(lambda: proj(emb(ids), "emb"), emb.parameters()),
        "feed_forward": lambda: nx.finite_diff_check(lambda: proj(ffn(x5), "ffn"), ffn.parameters() + [x5]),
        "lstm": lambda: nx.finite_diff_check(lambda: proj(lstm(seq), "lstm"), lstm.parameters() + [seq]),
        "lstm_reverse_batch": lambda: nx.finite_diff_check(
            lambda: proj(lstm(batch, reverse=True), "lstmb"), lstm.parameters() + [batch]),
        "bilstm": lambda: nx.finite_diff_check(lambda: proj(bi.final_states(seqs), "bi"),
                                               bi.parameters() + seqs),
        "attention": lambda: nx.finite_diff_check(attention_loss, att.parameters() + [q, k, v]),
    }


def _tiny_vocabs() -> tuple[CharVocab, SubwordVocab]:
    char = CharVocab.default()
    sub = SubwordVocab(["<blank>", "<bos>", "<unk>", "<no-bias>", "▁a", "b", "▁c", "a"], [])
    return char, sub


def transducer_loss_check(seed: int = 0, max_coords: int = 6) -> float:
    """Unbiased loss with T=3 frames and U=2 labels."""
    rng = np.random.default_rng(seed)
    model = Transducer(4, 6, rng, enc_hidden=5, enc_layers=2, pred_embed=3, pred_hidden=4,
                       model_dim=4, joint_hidden=5)
    frames = rng.normal(size=(3, 4))
    target = [4, 2]
    return nx.finite_diff_check(lambda: biased_loss(model, None, frames, target), model.parameters(),
                                eps=MODEL_EPS, max_coords=max_coords, rng=rng)


def char_plm_loss_check(seed: int = 0, max_coords: int = 6) -> float:
    """Biased Char-PLM loss with non-zero value projections, through every adapter parameter."""
    rng = np.random.default_rng(seed)
    char, sub = _tiny_vocabs()
    model = Transducer(4, len(sub), rng, enc_hidden=5, enc_layers=1, pred_embed=3, pred_hidden=4,
                       model_dim=4, joint_hidden=5)
    plm = PlmEncoder(len(sub), rng, embed_dim=3, hidden=4, layers=1)
    adapters = BiasingAdapters(VARIANTS["Char-PLM"], len(char), len(sub), 4, rng, plm=plm, embed_dim=3,
                               context_hidden=2, attn_dim=4, heads=2, zero_value=False)
    blist = BiasingList.from_texts(["ab", "c", "ba"], char, sub, correct_index=1)
    frames = rng.normal(size=(3, 4))
    target = [4, 5]
    model.set_trainable(False)
    plm.set_trainable(False)
    params = adapters.parameters() + model.parameters() + plm.parameters()
    return nx.finite_diff_check(lambda: biased_loss(model, adapters, frames, target, blist), params,
                                eps=MODEL_EPS, max_coords=max_coords, rng=rng)


def run_all(seed: int = 0) -> dict[str, float]:
    out = {name: check() for name, check in layer_checks(seed).items()}
    out["transducer_loss"] = transducer_loss_check(seed)
    out["char_plm_biased_loss"] = char_plm_loss_check(seed)
    return out
