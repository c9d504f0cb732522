import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dssmsh import DSSMForecaster
from dssmsh.data import simulate_linear_ssm
from dssmsh.errors import NonFiniteError, ShapeError

SMALL = dict(latent_dim=2, rnn_hidden_dim=4, head_hidden_dims=(4,), num_steps=3, batch_size=4, num_samples=10)


@pytest.fixture(scope="module")
def panel():
    tr, _ = simulate_linear_ssm(n_train=12, n_test=1, T=15, seed=30)
    return tr.u, tr.y[:, :, 0]


@pytest.fixture(scope="module")
def fitted(panel):
    X, y = panel
    return DSSMForecaster(**SMALL).fit(X[:, :10], y[:, :10])


def test_get_params_and_clone():
    est = DSSMForecaster(latent_dim=3, tau0=0.5)
    params = est.get_params()
    assert params["latent_dim"] == 3 and params["tau0"] == 0.5
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(decoder="mlp").decoder == "mlp"


def test_not_fitted(panel):
    X, y = panel
    with pytest.raises(NotFittedError):
        DSSMForecaster().predict(X, y, X[:, :2])


def test_fit_attributes(fitted):
    assert fitted.n_features_in_ == 1
    assert fitted.model_config_.obs_dim == 1 and fitted.model_config_.latent_dim == 2
    assert len(fitted.train_log_.records) == 3


def test_predict_shapes_squeeze(fitted, panel):
    X, y = panel
    assert fitted.predict(X[:, :10], y[:, :10], X[:, 10:15]).shape == (12, 5)
    bands = fitted.predict_quantiles(X[:, :10], y[:, :10], X[:, 10:13], quantiles=(0.1, 0.9))
    assert set(bands) == {0.1, 0.9} and bands[0.1].shape == (12, 3)
    assert np.all(bands[0.1] <= bands[0.9])
    assert fitted.sample_paths(X[:, :10], y[:, :10], X[:, 10:12]).samples.shape == (12, 10, 2, 1)


def test_predict_deterministic(fitted, panel):
    X, y = panel
    a = fitted.predict(X[:, :10], y[:, :10], X[:, 10:15])
    np.testing.assert_array_equal(a, fitted.predict(X[:, :10], y[:, :10], X[:, 10:15]))


def test_score_is_negative_nd(fitted, panel):
    X, y = panel
    s = fitted.score(X[:, :10], y[:, :10], X[:, 10:15], y[:, 10:15])
    assert s <= 0.0 and np.isfinite(s)


def test_three_d_response_not_squeezed(panel):
    X, y = panel
    est = DSSMForecaster(**SMALL).fit(X[:, :10], y[:, :10, None])
    assert est.predict(X[:, :10], y[:, :10, None], X[:, 10:12]).shape == (12, 2, 1)


def test_without_covariates_integer_horizon(panel):
    _, y = panel
    est = DSSMForecaster(**SMALL).fit(None, y[:, :10])
    assert est.n_features_in_ == 0
    assert est.predict(None, y[:, :10], 4).shape == (12, 4)


def test_integer_horizon_needs_no_covariates(fitted, panel):
    X, y = panel
    with pytest.raises(ValueError, match="X_future"):
        fitted.predict(X[:, :10], y[:, :10], 4)


def test_feature_mismatch(fitted, panel):
    X, y = panel
    with pytest.raises(ValueError, match="N=2"):
        fitted.predict(np.concatenate([X, X], 2)[:, :10], y[:, :10], X[:, 10:12])


def test_input_validation(panel):
    X, y = panel
    bad = y[:, :10].copy()
    bad[1, 3] = np.nan
    with pytest.raises(NonFiniteError, match=r"\(1, 3, 0\)"):
        DSSMForecaster(**SMALL).fit(X[:, :10], bad)
    with pytest.raises(ShapeError):
        DSSMForecaster(**SMALL).fit(X[:5, :10], y[:, :10])
    with pytest.raises(ShapeError):
        DSSMForecaster(**SMALL).fit(X[:, :10], y[:, :10], lengths=np.zeros(12, int))


def test_lengths_mask_tail(panel):
    X, y = panel
    n = np.full(12, 8)
    a = DSSMForecaster(**SMALL).fit(X[:, :10], y[:, :10], lengths=n)
    noisy = y[:, :10].copy()
    noisy[:, 8:] = 1e6
    b = DSSMForecaster(**SMALL).fit(X[:, :10], noisy, lengths=n)
    assert a.params_.equals(b.params_)


def test_save_load_round_trip(fitted, panel, tmp_path):
    X, y = panel
    fitted.save(tmp_path / "m.dssh")
    restored = DSSMForecaster(**SMALL).load_params(tmp_path / "m.dssh", obs_dim=1, covariate_dim=1)
    np.testing.assert_array_equal(restored.predict(X[:, :10], y[:, :10], X[:, 10:15]),
                                  fitted.predict(X[:, :10], y[:, :10], X[:, 10:15]))
