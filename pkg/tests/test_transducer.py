import math

import numpy as np
import pytest

from ctxbias import numerics as nx
from ctxbias.gradcheck import transducer_loss_check
from ctxbias.numerics import ContractError, DimensionError, DomainError, Tensor
from ctxbias.transducer import (AudioFeatures, EncoderStates, JointLattice, PredStates, Transducer,
                                greedy_decode, rnnt_loss)

from oracles import brute_force_rnnt_nll


def random_lattice(rng, T, U, V):
    logits = rng.normal(size=(T, U + 1, V)) * 2
    return logits - np.log(np.exp(logits).sum(-1, keepdims=True))


@pytest.fixture
def model():
    return Transducer(4, 6, np.random.default_rng(0), enc_hidden=5, enc_layers=2, pred_embed=3,
                      pred_hidden=4, model_dim=4, joint_hidden=5)


def test_single_alignment_loss():
    lp = random_lattice(np.random.default_rng(0), 1, 0, 4)
    assert rnnt_loss(JointLattice(Tensor(lp)), []).item() == -lp[0, 0, 0]


@pytest.mark.parametrize("seed", range(20))
def test_loss_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 6))
    lp = random_lattice(rng, T, U, V)
    target = list(rng.integers(1, V, size=U))
    got = rnnt_loss(JointLattice(Tensor(lp)), target).item()
    want = brute_force_rnnt_nll(lp, target)
    assert abs(got - want) <= 1e-9 * abs(want)


def test_uniform_lattice_closed_form():
    T, U, V = 3, 2, 4
    lp = np.full((T, U + 1, V), -np.log(V))
    got = rnnt_loss(JointLattice(Tensor(lp)), [1, 2]).item()
    want = -(math.log(math.comb(T + U - 1, U)) - (T + U) * math.log(V))
    assert got == pytest.approx(want, rel=1e-12)


def test_entries_no_path_reads_do_not_matter():
    """Only blank(t,u) with a successor frame, the target label at u < U and the final blank are read."""
    rng = np.random.default_rng(3)
    T, U, V = 3, 2, 5
    lp = random_lattice(rng, T, U, V)
    target = [1, 3]
    base = rnnt_loss(JointLattice(Tensor(lp)), target).item()
    used = np.zeros(lp.shape, dtype=bool)
    for t in range(T):
        for u in range(U + 1):
            used[t, u, 0] = t < T - 1 or u == U
            if u < U:
                used[t, u, target[u]] = True
    perturbed = np.where(used, lp, lp - 5.0 - rng.random(lp.shape))
    assert rnnt_loss(JointLattice(Tensor(perturbed)), target).item() == base
    lp[T - 1, U, 0] -= 1.0
    assert rnnt_loss(JointLattice(Tensor(lp)), target).item() != base


def test_loss_errors():
    lp = Tensor(random_lattice(np.random.default_rng(0), 2, 1, 3))
    with pytest.raises(ContractError):
        rnnt_loss(JointLattice(lp), [0])
    with pytest.raises(DimensionError):
        rnnt_loss(JointLattice(lp), [1, 2])
    with pytest.raises(ContractError):
        rnnt_loss(JointLattice(lp), [3])
    with pytest.raises(DomainError):
        rnnt_loss(JointLattice(Tensor(np.zeros((0, 2, 3)))), [1])


def test_loss_gradient_against_finite_differences():
    rng = np.random.default_rng(5)
    lp = Tensor(random_lattice(rng, 4, 3, 5))
    assert nx.finite_diff_check(lambda: rnnt_loss(JointLattice(lp), [1, 4, 2]), [lp], eps=1e-4) < 1e-5


def test_full_model_gradient():
    assert transducer_loss_check() < 1e-4


def test_encoder_causality(model):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    h = model.encode_audio(AudioFeatures(x)).h.data
    y = x.copy()
    y[3] += 1.0
    h2 = model.encode_audio(AudioFeatures(y)).h.data
    assert h[:3].tobytes() == h2[:3].tobytes()
    assert model.encode_audio(AudioFeatures(x[:1])).h.shape == (1, 4)
    with pytest.raises(DomainError):
        model.encode_audio(AudioFeatures(np.zeros((0, 4))))


def test_predict_prefix_and_bos(model):
    assert model.predict([]).g.shape == (1, 4)
    full = model.predict([1, 3, 5]).g.data
    prefix = model.predict([1, 3]).g.data
    assert full[:3].tobytes() == prefix.tobytes()
    with pytest.raises(ContractError):
        model.predict([2, 0])


def test_joint_shape_normalization_and_additivity(model):
    rng = np.random.default_rng(2)
    h = Tensor(rng.normal(size=(2, 4)))
    g = Tensor(rng.normal(size=(2, 4)))
    lat = model.joint(EncoderStates(h), PredStates(g)).log_probs.data
    assert lat.shape == (2, 2, 6)
    np.testing.assert_allclose(np.log(np.exp(lat).sum(-1)), 0.0, atol=1e-9)
    c = rng.normal(size=4)
    a = model.joint(EncoderStates(Tensor(h.data + c)), PredStates(g)).log_probs.data
    b = model.joint(EncoderStates(h), PredStates(Tensor(g.data + c))).log_probs.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        model.joint(EncoderStates(h), PredStates(Tensor(np.ones((2, 3)))))


def test_joint_logits_match_lattice(model):
    rng = np.random.default_rng(4)
    feats = AudioFeatures(rng.normal(size=(3, 4)))
    enc = model.encode_audio(feats).h.data
    g, _ = model.pred_start()
    lat = model.joint(model.encode_audio(feats), model.predict([])).log_probs.data
    logits = model.joint_logits(enc[1], g)
    np.testing.assert_allclose(logits - np.log(np.exp(logits).sum()), lat[1, 0], atol=1e-12)


def test_greedy_always_blank_is_empty(model):
    model.joint_net.layers[-1].bias.data[:] = -100
    model.joint_net.layers[-1].bias.data[0] = 100
    hyp = greedy_decode(model, AudioFeatures(np.ones((4, 4))))
    assert hyp.tokens.ids == ()


def test_greedy_label_then_blank(model):
    last = model.joint_net.layers[-1]
    last.weight.data[:] = 0.0
    last.bias.data[:] = 0.0
    last.bias.data[3] = 10.0
    hyp = greedy_decode(model, AudioFeatures(np.ones((1, 4))), max_symbols_per_frame=3)
    assert hyp.tokens.ids == (3, 3, 3)
    hyp = greedy_decode(model, AudioFeatures(np.ones((2, 4))), max_symbols_per_frame=1)
    assert hyp.tokens.ids == (3, 3)
    with pytest.raises(DomainError):
        greedy_decode(model, AudioFeatures(np.ones((1, 4))), max_symbols_per_frame=0)


def test_greedy_deterministic(model):
    x = AudioFeatures(np.random.default_rng(8).normal(size=(6, 4)))
    assert greedy_decode(model, x).tokens == greedy_decode(model, x).tokens
