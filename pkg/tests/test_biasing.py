import math
import warnings

import numpy as np
import pytest

from ctxbias import biasing as bz
from ctxbias import tokenize as tk
from ctxbias.nnet import AttentionParams, bilstm_final_state
from ctxbias.numerics import ContractError, DimensionError, Tensor
from ctxbias.transducer import AudioFeatures, EncoderStates, PredStates, Transducer, rnnt_loss

CORPUS = ["alpha beta gamma delta", "zeta theta iota kappa", "lambda mu nu xi omicron"]
RARE = ["alpha", "beta", "gamma", "delta", "zeta", "theta", "iota", "kappa"]
D = 8


@pytest.fixture(scope="module")
def vocabs():
    return tk.CharVocab.default(), tk.train_bpe(CORPUS, 60)


@pytest.fixture(scope="module")
def model(vocabs):
    return Transducer(4, len(vocabs[1]), np.random.default_rng(0), enc_hidden=6, enc_layers=1,
                      pred_embed=4, pred_hidden=6, model_dim=D, joint_hidden=6)


@pytest.fixture(scope="module")
def plm(vocabs):
    return bz.PlmEncoder(len(vocabs[1]), np.random.default_rng(1), embed_dim=4, hidden=6, layers=2)


def adapters_for(name, vocabs, plm=None, zero_value=True, seed=2):
    cv, sv = vocabs
    return bz.BiasingAdapters(bz.VARIANTS[name], len(cv), len(sv), D, np.random.default_rng(seed),
                              plm=plm, embed_dim=4, context_hidden=4, attn_dim=4, heads=2,
                              zero_value=zero_value)


def blist(vocabs, words, correct=None):
    return bz.BiasingList.from_texts(words, *vocabs, correct_index=correct)


def test_entry_and_list_invariants(vocabs):
    with pytest.raises(ContractError):
        bz.BiasingList([bz.BiasEntry.from_text("alpha", *vocabs)])
    with pytest.raises(ContractError):
        blist(vocabs, ["alpha", "alpha"])
    with pytest.raises(ContractError):
        blist(vocabs, ["alpha"], correct=0)
    with pytest.raises(ContractError):
        bz.BiasEntry("x", tk.TokenSequence((), "char"), tk.TokenSequence((), "subword"))


def test_list_text_round_trip(vocabs):
    b = blist(vocabs, ["beta", "alpha"], correct=2)
    text = b.to_text()
    assert text.splitlines() == ["<no-bias>", "beta", "*alpha"]
    again = bz.BiasingList.from_text(text, *vocabs)
    assert again.texts == b.texts and again.correct_index == 2
    with pytest.raises(ContractError):
        bz.BiasingList.from_text("alpha\n", *vocabs)


def test_build_list_examples(vocabs):
    b = bz.build_biasing_list("lambda mu", RARE, 5, np.random.default_rng(0), *vocabs)
    assert b.K == 5 and b.correct_index is None and b.entries[0].is_no_bias
    b = bz.build_biasing_list("alpha and beta", RARE, 6, np.random.default_rng(0), *vocabs)
    assert b.K == 6 and {"alpha", "beta"} <= set(b.texts)
    assert b.texts[b.correct_index] == "alpha"
    again = bz.build_biasing_list("alpha and beta", RARE, 6, np.random.default_rng(0), *vocabs)
    assert again.texts == b.texts
    d = bz.build_biasing_list("alpha", RARE, 4, np.random.default_rng(0), *vocabs, include_correct=False)
    assert d.K == 4 and "alpha" not in d.texts and d.correct_index is None


def test_build_list_caps_with_warning(vocabs):
    with pytest.warns(UserWarning):
        b = bz.build_biasing_list("alpha", RARE, 50, np.random.default_rng(0), *vocabs)
    assert b.K == len(RARE)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        bz.build_biasing_list("alpha", RARE, len(RARE), np.random.default_rng(0), *vocabs)


def test_no_bias_only_context(vocabs):
    enc = bz.ContextEncoder(len(vocabs[0]), 4, 3, np.random.default_rng(0), "char")
    rows = bz.encode_context_char(blist(vocabs, []), enc)
    assert rows.shape == (1, 6)
    np.testing.assert_array_equal(rows.data[0], enc.no_bias.data)


def test_single_entity_row_is_bilstm_state(vocabs):
    enc = bz.ContextEncoder(len(vocabs[0]), 4, 3, np.random.default_rng(0), "char")
    b = blist(vocabs, ["a"])
    want = bilstm_final_state(enc.embedding(b.entries[1].char_ids), enc.bilstm).data
    np.testing.assert_allclose(bz.encode_context_char(b, enc).data[1], want, rtol=0, atol=1e-14)
    sub = bz.ContextEncoder(len(vocabs[1]), 4, 3, np.random.default_rng(0), "subword")
    want = bilstm_final_state(sub.embedding(b.entries[1].subword_ids), sub.bilstm).data
    np.testing.assert_allclose(bz.encode_context_subword(b, sub).data[1], want, rtol=0, atol=1e-14)


def test_plm_rows_and_prefix_states(vocabs, plm):
    b = blist(vocabs, ["alpha", "kappa", "mu"])
    no_bias = Tensor(np.ones(6))
    rows = bz.encode_context_plm(b, plm, no_bias).data
    np.testing.assert_array_equal(rows[0], np.ones(6))
    for i, e in enumerate(b.entries[1:], start=1):
        want = bz.plm_prefix_state(e.subword_ids.ids, plm).data
        np.testing.assert_allclose(rows[i], want, rtol=0, atol=1e-14)
    assert bz.encode_context_plm(blist(vocabs, []), plm, no_bias).shape == (1, 6)


def test_plm_prefix_incremental(vocabs, plm):
    toks = list(tk.encode_subword("alpha mu", vocabs[1]).ids)
    states = plm.prefix_states(toks).data
    h, s = plm.start()
    np.testing.assert_allclose(h, states[0], atol=1e-14)
    for u, t in enumerate(toks, start=1):
        h, s = plm.advance(s, t)
        np.testing.assert_allclose(h, states[u], atol=1e-14)
    np.testing.assert_array_equal(states[:2], plm.prefix_states(toks[:1]).data)


def test_plm_lm_is_normalized(vocabs, plm):
    from ctxbias import numerics as nx
    logp = nx.log_softmax(plm.output(plm.prefix_states([5, 6]))).data
    np.testing.assert_allclose(np.exp(logp).sum(-1), 1.0, atol=1e-12)


def test_variant_table_wiring():
    rows = {n: (v.eba_key_source, v.eba_value_source, v.pnba_enabled and
                (v.pnba_query_source, v.pnba_key_source, v.pnba_value_source))
            for n, v in bz.VARIANTS.items()}
    assert rows == {
        "Baseline": ("subword", "subword", False),
        "Char-I": ("char", "char", False),
        "Char-II": ("char", "subword", False),
        "Char-Subword": ("char", "subword", ("prednet", "subword", "subword")),
        "Subword-PLM": ("subword", "subword", ("prednet", "subword", "subword")),
        "Char-PLM": ("char", "subword", ("plm", "plm", "subword")),
    }
    with pytest.raises(ValueError):
        bz.VariantConfig("bad", "plm", "subword")
    with pytest.raises(ValueError):
        bz.VariantConfig("bad", "char", "subword", True, "prednet", "subword", "char")


def test_plm_variant_needs_plm(vocabs):
    with pytest.raises(ContractError):
        adapters_for("Char-PLM", vocabs)


def test_shared_subword_value_encoder(vocabs):
    ad = adapters_for("Char-Subword", vocabs)
    ctx = ad.context(blist(vocabs, ["alpha", "beta"]))
    assert ad.eba_context(ctx).values is ad.pnba_context(ctx).values
    assert ad.eba is not ad.pnba and ad.eba.w_v is not ad.pnba.w_v


def test_unused_encoders_absent(vocabs):
    ad = adapters_for("Char-I", vocabs)
    assert ad.sub_encoder is None and ad.pnba is None
    g = PredStates(Tensor(np.ones((3, D))))
    out, scores = ad.bias_pred(g, [5, 6], ad.context(blist(vocabs, ["alpha"])))
    assert out is g and scores is None


@pytest.mark.parametrize("name", sorted(bz.VARIANTS))
def test_safe_start_lattice_identical(name, vocabs, model, plm):
    ad = adapters_for(name, vocabs, plm=plm)
    rng = np.random.default_rng(3)
    frames = AudioFeatures(rng.normal(size=(5, 4)))
    target = list(tk.encode_subword("alpha mu", vocabs[1]).ids)
    enc, pred = model.encode_audio(frames), model.predict(target)
    base = model.joint(enc, pred).log_probs.data
    ctx = ad.context(blist(vocabs, ["alpha", "beta", "iota"], correct=1))
    e2, _ = ad.bias_encoder(enc, ctx)
    p2, _ = ad.bias_pred(pred, target, ctx)
    assert model.joint(e2, p2).log_probs.data.tobytes() == base.tobytes()
    b = bz.biased_loss(model, ad, frames.frames, target, ctx.blist).item()
    assert b == rnnt_loss(model.joint(enc, pred), target).item()


def test_no_bias_only_scores_are_one(vocabs):
    ad = adapters_for("Char-Subword", vocabs, zero_value=False)
    ctx = ad.context(blist(vocabs, []))
    h = EncoderStates(Tensor(np.random.default_rng(0).normal(size=(4, D))))
    out, scores = ad.bias_encoder(h, ctx)
    assert scores.data.tolist() == [[1.0]] * 4
    no_bias_value = ctx.embeddings["subword"].data[0] @ ad.eba.w_v.data
    np.testing.assert_allclose(out.h.data, h.h.data + no_bias_value, atol=1e-14)
    _, ps = ad.bias_pred(PredStates(Tensor(np.ones((2, D)))), [5], ctx)
    assert ps.data.tolist() == [[1.0]] * 2


def test_hand_set_log9_gap():
    p = AttentionParams(1, 3, 1, np.random.default_rng(0), attn_dim=1, out_dim=1, heads=1, zero_value=False)
    p.w_q.data = np.array([[1.0]])
    p.w_k.data = np.array([[0.0], [math.log(9.0)], [0.0]])
    ctx = bz.ContextEmbeddings(Tensor(np.eye(3)), Tensor(np.array([[0.0], [1.0], [2.0]])), "char", "subword")
    out, scores = bz.acoustic_bias(EncoderStates(Tensor([[1.0]])), ctx, p)
    np.testing.assert_allclose(scores.data[0], [1 / 11, 9 / 11, 1 / 11], rtol=0, atol=1e-15)
    assert scores.data[0, 1] / scores.data[0, 2] == pytest.approx(9.0, rel=1e-13)
    mixed_value = (0.0 * 1 + 1.0 * 9 + 2.0 * 1) / 11
    np.testing.assert_allclose(out.h.data, [[1.0 + mixed_value * p.w_v.data[0, 0]]], atol=1e-14)


def test_acoustic_bias_dimension_error(vocabs):
    p = AttentionParams(D, 3, 2, np.random.default_rng(0), attn_dim=4, out_dim=2)
    ctx = bz.ContextEmbeddings(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), "char", "subword")
    with pytest.raises(DimensionError):
        bz.acoustic_bias(EncoderStates(Tensor(np.ones((3, D)))), ctx, p)
    with pytest.raises(DimensionError):
        bz.ContextEmbeddings(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), "char", "subword")


def test_semantic_bias_needs_plm_states(vocabs):
    p = AttentionParams(D, 3, 2, np.random.default_rng(0), attn_dim=4, out_dim=D)
    ctx = bz.ContextEmbeddings(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), "plm", "subword")
    with pytest.raises(ContractError):
        bz.semantic_bias(PredStates(Tensor(np.ones((2, D)))), "plm", ctx, p)


@pytest.mark.parametrize("name", ["Char-II", "Char-PLM"])
def test_scores_normalized_and_permutation_equivariant(name, vocabs, model, plm):
    ad = adapters_for(name, vocabs, plm=plm, zero_value=False)
    words = ["alpha", "theta", "kappa", "beta"]
    perm = [2, 0, 3, 1]
    rng = np.random.default_rng(4)
    enc = model.encode_audio(AudioFeatures(rng.normal(size=(4, 4))))
    target = list(tk.encode_subword("zeta mu", vocabs[1]).ids)
    pred = model.predict(target)
    outs = []
    for ws in (words, [words[i] for i in perm]):
        ctx = ad.context(blist(vocabs, ws))
        e, es = ad.bias_encoder(enc, ctx)
        p, ps = ad.bias_pred(pred, target, ctx)
        outs.append((e.h.data, es.data, None if ps is None else (p.g.data, ps.data)))
        np.testing.assert_allclose(es.data.sum(-1), 1.0, atol=1e-12)
        if ps is not None:
            np.testing.assert_allclose(ps.data.sum(-1), 1.0, atol=1e-12)
    cols = [0] + [1 + i for i in perm]
    np.testing.assert_allclose(outs[0][0], outs[1][0], atol=1e-12)
    np.testing.assert_allclose(outs[0][1][:, cols], outs[1][1], atol=1e-12)
    if outs[0][2] is not None:
        np.testing.assert_allclose(outs[0][2][0], outs[1][2][0], atol=1e-12)
        np.testing.assert_allclose(outs[0][2][1][:, cols], outs[1][2][1], atol=1e-12)


def test_decode_hooks_match_full_sequence(vocabs, model, plm):
    ad = adapters_for("Char-PLM", vocabs, plm=plm, zero_value=False)
    b = blist(vocabs, ["alpha", "beta"])
    target = list(tk.encode_subword("alpha", vocabs[1]).ids)
    pred = model.predict(target)
    full, scores = ad.bias_pred(pred, target, ad.context(b))
    hooks = ad.decoder_hooks(b)
    q = hooks.query_start()
    for u in range(len(target) + 1):
        row, s = hooks.bias_pred(pred.g.data[u], q)
        np.testing.assert_allclose(row, full.g.data[u], atol=1e-12)
        np.testing.assert_allclose(s[0] if s.ndim == 2 else s, scores.data[u], atol=1e-12)
        if u < len(target):
            q = hooks.query_advance(q, target[u])
