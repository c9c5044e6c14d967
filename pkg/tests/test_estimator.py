import numpy as np
import pytest
from sklearn.base import clone

from gaprppg._validation import ValidationError
from gaprppg.estimator import GAPEstimator, STMapTransformer
from gaprppg.synth import DomainProfile, SubjectProfile, Vitals, generate_clip


def test_transformer_shapes():
    clip, _ = generate_clip(SubjectProfile("s"), DomainProfile("d"), Vitals(72, 15), 10.0, rng=0)
    X = STMapTransformer(window=256, stride=10, rows=32).fit_transform([clip, clip.traces])
    assert X.shape == (2 * 5, 256, 32, 3)
    assert X.min() >= 0 and X.max() <= 1


def test_transformer_too_short():
    with pytest.raises(ValidationError):
        STMapTransformer(window=512).fit_transform([np.random.default_rng(0).random((4, 300, 3))])


def test_params_and_clone():
    est = GAPEstimator(iterations=3, ablation=True)
    assert clone(est).get_params()["iterations"] == 3


@pytest.fixture(scope="module")
def fitted(small_dataset):
    est = GAPEstimator(iterations=3, batch_size=4, eval_every=3, heldout_domain="dom3", stride=50, rows=32)
    return est.fit(small_dataset)


def test_fit_predict_score(fitted, small_dataset):
    from gaprppg.dataset import STMapDataset

    ds = STMapDataset(small_dataset, ["dom3"], stride=50, rows=32)
    X = np.stack([ds.get_window(k) for k in range(4)])
    pred = fitted.predict(X)
    assert pred.shape == (4, 3) and np.isfinite(pred).all()
    assert fitted.predict_bvp(X).shape == (4, 256)
    y = np.array([[ds.labels(k)[t] for t in ("hr", "rr", "spo2")] for k in range(4)], dtype=float)
    assert fitted.score(X, y) <= 0
    assert fitted.heldout_accesses_ == []
    with pytest.raises(ValidationError):
        fitted.predict(np.zeros((1, 100, 32, 3)))


def test_save_load(fitted, tmp_path):
    fitted.save(tmp_path / "m.pt")
    back = GAPEstimator.load(tmp_path / "m.pt")
    X = np.random.default_rng(0).random((2, 256, 32, 3))
    np.testing.assert_allclose(back.predict(X), fitted.predict(X), rtol=1e-6)
    assert back.get_params()["rows"] == 32


def test_adapt(fitted, small_dataset):
    res = fitted.adapt(small_dataset, "dom3", subjects=["dom3_s00"])
    assert set(res.session_checksums) == {"dom3_s00"}


def test_rejects_y(small_dataset):
    with pytest.raises(ValidationError):
        GAPEstimator().fit(small_dataset, y=[1])


def test_unfitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        GAPEstimator().predict(np.zeros((1, 256, 64, 3)))
