import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from behaviorkit.errors import InvalidArgumentError
from behaviorkit.estimators import (AttentiveProbeClassifier, FrozenEncoderEmbedder, JEPAPretrainer,
                                    check_clips, check_tokens)
from behaviorkit.config import desk_preset


def tokens(n=80, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(0, 1, (n, 4, 8)).astype(np.float32)
    x[:, :, 0] += np.where(y == 1, 2.0, -2.0)[:, None]
    return x, y


def clips(n=6, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, 8, 32, 32, 3), dtype=np.uint8)


def test_probe_params_and_clone():
    est = AttentiveProbeClassifier(lr=0.01, max_epochs=3)
    params = est.get_params()
    assert params["lr"] == 0.01 and params["head"] == "attention"
    c = clone(est).set_params(head="full")
    assert c.head == "full" and est.head == "attention"


def test_probe_fit_predict_string_labels():
    x, y = tokens()
    names = np.array(["drift", "still"])[y]
    est = AttentiveProbeClassifier(num_heads=2, lr=1e-2, max_epochs=10, patience=3).fit(x, names)
    assert list(est.classes_) == ["drift", "still"]
    pred = est.predict(x)
    assert pred.dtype.kind == "U" and set(pred) <= {"drift", "still"}
    assert est.score(x, names) > 0.8
    np.testing.assert_allclose(est.predict_proba(x).sum(1), 1.0, atol=1e-6)


def test_probe_explicit_validation_and_multi_label():
    x, y = tokens()
    Y = np.stack([y, 1 - y], 1)
    est = AttentiveProbeClassifier(num_heads=2, max_epochs=2, task="multi").fit(x, Y, x, Y)
    assert est.predict(x).shape == (80, 2) and est.report_["metric"] == "mAP"


def test_probe_not_fitted_and_bad_input():
    with pytest.raises(NotFittedError):
        AttentiveProbeClassifier().predict(np.zeros((1, 2, 8)))
    x, y = tokens()
    with pytest.raises(InvalidArgumentError):
        AttentiveProbeClassifier().fit(x[:, 0], y)
    with pytest.raises(InvalidArgumentError):
        AttentiveProbeClassifier().fit(x, np.zeros(len(x)))
    est = AttentiveProbeClassifier(num_heads=2, max_epochs=1).fit(x, y)
    with pytest.raises(InvalidArgumentError):
        est.predict(np.zeros((1, 4, 6)))


def test_validation_helpers():
    cfg = desk_preset()
    assert check_clips(clips(2), cfg).dtype == np.float32
    with pytest.raises(InvalidArgumentError):
        check_clips(np.zeros((2, 8, 32, 32)), cfg)
    with pytest.raises(InvalidArgumentError):
        check_clips(np.full((1, 8, 32, 32, 3), np.nan), cfg)
    with pytest.raises(InvalidArgumentError):
        check_tokens(np.zeros((0, 4, 8)))


def test_embedder_pipeline():
    x = clips(12)
    y = np.arange(12) % 2
    pipe = make_pipeline(FrozenEncoderEmbedder(), AttentiveProbeClassifier(max_epochs=2))
    pipe.fit(x, y)
    assert pipe.predict(x).shape == (12,)
    emb = pipe[0].transform(x)
    assert emb.shape == (12, 64, 64)
    # the embedder is frozen: transforming twice gives the same tokens
    assert np.array_equal(emb, pipe[0].transform(x))


def test_pretrainer_fit_transform_and_checkpoint(tmp_path):
    x = clips()
    a = JEPAPretrainer(total_steps=3, batch_size=2).fit(x)
    b = JEPAPretrainer(total_steps=3, batch_size=2).fit(x)
    assert a.loss_curve_.shape == (3,) and np.array_equal(a.loss_curve_, b.loss_curve_)
    assert a.transform(x).shape == (6, 64, 64)
    a.save(tmp_path / "ck")
    emb = FrozenEncoderEmbedder(checkpoint=tmp_path / "ck").fit()
    assert np.array_equal(emb.transform(x), a.transform(x))
