import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ctxbias import data as dt
from ctxbias.estimator import ContextualTransducer

TEXTS = ["bob ran far", "al sat", "bob sat far", "al ran", "cy ran far", "al sat far"] * 3


def features(texts):
    spec = dt.SyntheticSpec(feature_dim=8)
    return [dt.stack_and_downsample(dt.Utterance(f"u{i}", t).features(spec, 0)).frames
            for i, t in enumerate(texts)]


def tiny(**kw):
    params = dict(subword_size=40, top_n=2, base_epochs=1, adapter_epochs=1, plm_epochs=1, batch_size=4,
                  train_k=2, model_dim=8, enc_hidden=8)
    params.update(kw)
    return ContextualTransducer(**params)


def test_params_and_clone():
    est = tiny(variant="Char-PLM")
    assert clone(est).get_params() == est.get_params()
    assert est.get_params()["variant"] == "Char-PLM"


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        tiny().predict(features(["al"]))


def test_fit_predict_score():
    X = features(TEXTS)
    est = tiny(variant="Char-PLM").fit(X, TEXTS)
    assert est.adapters_ is not None and len(est.base_loss_) == 1
    hyps = est.predict(X[:2], biasing_lists=[["cy"], []])
    assert len(hyps) == 2 and all(isinstance(h, str) for h in hyps)
    s = est.score(X[:4], TEXTS[:4])
    assert s <= 1.0


def test_unbiased_variant_and_errors():
    X = features(TEXTS)
    est = tiny(variant=None).fit(X, TEXTS)
    assert est.adapters_ is None
    assert len(est.predict(X[:1])) == 1
    with pytest.raises(ValueError):
        tiny(variant="Nope").fit(X, TEXTS)
    with pytest.raises(ValueError):
        tiny().fit(X, TEXTS[:-1])
    with pytest.raises(ValueError):
        est.predict([np.zeros((0, 24))])
    with pytest.raises(ValueError):
        est.predict(X[:2], biasing_lists=[["al"]])


def test_fit_is_deterministic():
    X = features(TEXTS[:6])
    a = tiny(variant="Char-II", random_state=3).fit(X, TEXTS[:6])
    b = tiny(variant="Char-II", random_state=3).fit(X, TEXTS[:6])
    for p, q in zip(a.adapters_.parameters(), b.adapters_.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
