import numpy as np
import pytest
from sklearn.base import clone

from spikedistill.estimators import (ANNClassifier, LayerwiseDistiller, SpikingClassifier,
                                     check_images, check_labels)


def _data(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    X = rng.normal(0, 0.2, (n, 1, 6, 6)).astype(np.float32)
    for i, c in enumerate(y):
        X[i, 0, 2 * c:2 * c + 2, :] = 0.9
    return X, y


def test_params_and_clone():
    est = ANNClassifier(arch="mlp", epochs=2, lr=0.1)
    params = est.get_params()
    assert params["arch"] == "mlp" and params["lr"] == 0.1
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    d = LayerwiseDistiller(alpha=0.0, epochs=1)
    assert clone(d).get_params()["alpha"] == 0.0


def test_input_validation():
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 6, 6)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 1, 2, 2), np.nan))
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 1, 2, 2)), (1, 3, 3))
    with pytest.raises(ValueError):
        check_labels(np.array([0.5, 1.0]), 2)
    with pytest.raises(ValueError):
        check_labels(np.array([0, 3]), 2, num_classes=3)
    with pytest.raises(Exception):
        ANNClassifier().predict(np.zeros((1, 1, 6, 6)))


def test_three_stage_fit_predict():
    X, y = _data(90, 0)
    Xt, yt = _data(30, 1)
    inter = ANNClassifier(arch="mlp", arch_params={"hidden": (24,)}, num_classes=3, epochs=5,
                          lr=0.05, batch_size=16).fit(X, y)
    assert inter.score(Xt, yt) > 0.9
    assert inter.predict_proba(Xt).shape == (30, 3)
    spk = SpikingClassifier(time_steps=60, calibration_time_steps=60, calibration_samples=40)
    spk.fit(X, source=inter)
    assert np.all(spk.checkpoint_.thresholds > 0)
    assert spk.score(Xt, yt) > 0.8
    with pytest.raises(ValueError, match="source"):
        SpikingClassifier().fit(X)

    teacher = ANNClassifier(arch="mlp", arch_params={"hidden": (32,)}, role="teacher",
                            num_classes=3, epochs=2, lr=0.05)
    hybrid = LayerwiseDistiller(teacher=teacher, alpha=0.0, epochs=1, time_steps=8, lr=1e-3)
    hybrid.fit(X, y, student=spk)
    assert [r["epoch"] for r in hybrid.history_] == [0, 1]
    assert hybrid.predict(Xt).shape == (30,)
