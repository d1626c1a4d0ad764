import numpy as np
import pytest
from sklearn.base import clone

from drlfd import NextPoseRegressor
from drlfd.validation import NotFittedError, ValidationError

SMALL = dict(image_size=(32, 32), dense_head=(16, 7), epochs=2, batch_size=16)


@pytest.fixture(scope="module")
def parts(small_samples):
    cam1 = [s for s in small_samples if s.camera_id == 1]
    train = [s for s in cam1 if s.trial_id != "trial_002"]
    test = [s for s in cam1 if s.trial_id == "trial_002"]
    return train, test


def test_get_params_and_clone():
    est = NextPoseRegressor(variant="gru", window=3, lr=3e-4)
    params = est.get_params()
    assert params["variant"] == "gru" and params["window"] == 3 and params["residual"] is True
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lr=1e-2)
    assert est.lr == 1e-2 and twin.lr == 3e-4


def test_unfitted_predict_raises(parts):
    with pytest.raises(NotFittedError):
        NextPoseRegressor().predict(parts[1])


def test_fit_predict_score(parts):
    train, test = parts
    est = NextPoseRegressor(**SMALL).fit(train, X_val=test[:10])
    pred = est.predict(test)
    assert pred.shape == (len(test), 7)
    assert np.allclose(np.linalg.norm(pred[:, :4], axis=1), 1.0)
    assert est.history_.epochs_run == 2
    assert est.n_features_in_ == est.model_.concat_width
    assert est.score(test) <= 0.0


def test_fit_is_deterministic(parts):
    train, test = parts
    a = NextPoseRegressor(**SMALL, seed=4).fit(train).predict(test)
    b = NextPoseRegressor(**SMALL, seed=4).fit(train).predict(test)
    assert np.array_equal(a, b)


def test_recurrent_with_encoder_transfer(parts):
    train, test = parts
    ff = NextPoseRegressor(**SMALL).fit(train)
    rec = NextPoseRegressor(**SMALL, variant="lstm", window=4, encoder=ff).fit(train)
    assert rec.model_.frozen_encoder
    pred = rec.predict(test)
    assert pred.shape == (len(test) - 3, 7)
    assert rec.targets(test).shape == pred.shape


def test_fit_rejects_bad_inputs(parts):
    train, _ = parts
    with pytest.raises(ValidationError):
        NextPoseRegressor(**SMALL).fit([])
    with pytest.raises(ValidationError):
        NextPoseRegressor(**SMALL).fit(train, y=np.zeros((len(train), 7)))
    with pytest.raises(NotFittedError):
        NextPoseRegressor(**SMALL, encoder=NextPoseRegressor()).fit(train)
