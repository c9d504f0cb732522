"""scikit-learn style wrapper around configuration, training and forecasting."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import nd
from .forecasting import ForecastConfig, ForecastResult, forecast
from .model import ModelConfig
from .neuralnet import load_checkpoint, save_checkpoint
from .shrinkage import ShrinkageHyper
from .training import TrainConfig, standardize, train
from .validation import check_covariates, check_panel, to_batch


class DSSMForecaster(BaseEstimator):
    """Deep state-space forecaster with global-local shrinkage on the latent states.

    ``fit`` takes covariates ``X`` [S x T x N] (or None) and responses ``y``
    [S x T] or [S x T x M]; forecasting methods take a history ``(X, y)``
    and future covariates ``X_future`` [S x p x N].

    Parameters
    ----------
    latent_dim, rnn_hidden_dim, rnn_layers, head_hidden_dims, decoder, sigma_floor
        Network shape; see :class:`~dssmsh.model.ModelConfig`.
    tau0, c0, c1 : float
        Global shrinkage hyperparameters.
    batch_size, num_steps, learning_rate, grad_clip_norm, validation_fraction
        Optimizer settings; see :class:`~dssmsh.training.TrainConfig`.
    num_samples : int
        Monte Carlo paths per forecast.
    quantiles : tuple of float
    lambda_source : {"inference", "prior"}
    random_state : int
    threads : int

    Attributes
    ----------
    model_config_ : ModelConfig
    params_ : ParameterStore
    train_log_ : TrainLog
    n_features_in_ : int
        Number of covariates.
    """

    def __init__(self, latent_dim=8, rnn_hidden_dim=32, rnn_layers=1, head_hidden_dims=(32, 32),
                 decoder="linear", sigma_floor=1e-4, tau0=1.0, c0=2.0, c1=1.0, batch_size=32,
                 num_steps=1000, learning_rate=1e-3, grad_clip_norm=10.0, validation_fraction=0.1,
                 num_samples=50, quantiles=(0.05, 0.5, 0.95), lambda_source="inference",
                 random_state=0, threads=1):
        self.latent_dim = latent_dim
        self.rnn_hidden_dim = rnn_hidden_dim
        self.rnn_layers = rnn_layers
        self.head_hidden_dims = head_hidden_dims
        self.decoder = decoder
        self.sigma_floor = sigma_floor
        self.tau0 = tau0
        self.c0 = c0
        self.c1 = c1
        self.batch_size = batch_size
        self.num_steps = num_steps
        self.learning_rate = learning_rate
        self.grad_clip_norm = grad_clip_norm
        self.validation_fraction = validation_fraction
        self.num_samples = num_samples
        self.quantiles = quantiles
        self.lambda_source = lambda_source
        self.random_state = random_state
        self.threads = threads

    def _model_config(self, obs_dim, covariate_dim) -> ModelConfig:
        return ModelConfig(
            obs_dim=obs_dim, covariate_dim=covariate_dim, latent_dim=self.latent_dim,
            rnn_hidden_dim=self.rnn_hidden_dim, rnn_layers=self.rnn_layers,
            head_hidden_dims=tuple(self.head_hidden_dims),
            shrinkage=ShrinkageHyper(self.tau0, self.c0, self.c1),
            sigma_floor=self.sigma_floor, decoder=self.decoder,
        )

    def _forecast_config(self, horizon, quantiles=None) -> ForecastConfig:
        return ForecastConfig(horizon=horizon, num_samples=self.num_samples,
                              quantiles=tuple(self.quantiles if quantiles is None else quantiles),
                              seed=self.random_state, lambda_source=self.lambda_source, threads=self.threads)

    def fit(self, X, y, lengths=None):
        """Train on a panel of series.

        Parameters
        ----------
        X : array [S x T x N] or None
        y : array [S x T] or [S x T x M]
        lengths : array of int [S], optional
            Valid prefix per series; later entries are ignored.

        Returns
        -------
        self
        """
        batch, squeeze = to_batch(X, y, lengths)
        self.model_config_ = self._model_config(batch.obs_dim, batch.covariate_dim)
        tcfg = TrainConfig(batch_size=self.batch_size, num_steps=self.num_steps,
                           learning_rate=self.learning_rate, seed=self.random_state,
                           grad_clip_norm=self.grad_clip_norm, validation_fraction=self.validation_fraction)
        self.params_, self.train_log_ = train(self.model_config_, tcfg, standardize(batch)[0])
        self.n_features_in_ = batch.covariate_dim
        self._squeeze = squeeze
        return self

    def _history(self, X, y, X_future):
        check_is_fitted(self, "params_")
        batch, _ = to_batch(X, y)
        if batch.covariate_dim != self.n_features_in_ or batch.obs_dim != self.model_config_.obs_dim:
            raise ValueError(f"history has N={batch.covariate_dim}, M={batch.obs_dim}; "
                             f"the model was fitted with N={self.n_features_in_}, M={self.model_config_.obs_dim}")
        if X_future is None or np.ndim(X_future) == 0:
            p = None if X_future is None else int(X_future)
            if p is None or p < 1 or self.n_features_in_:
                raise ValueError("X_future must give the future covariates (an int horizon only works with N=0)")
            u_fut = np.zeros((len(batch), p, 0))
        else:
            u_arr = np.asarray(X_future, dtype=np.float64)
            u_fut = check_covariates(u_arr, len(batch), u_arr.shape[1], "X_future")
        return batch, u_fut

    def sample_paths(self, X, y, X_future) -> ForecastResult:
        """Monte Carlo response paths past the history ``(X, y)``.

        ``X_future`` is [S x p x N]; for a model without covariates an int
        horizon is accepted instead.
        """
        batch, u_fut = self._history(X, y, X_future)
        return forecast(self.model_config_, self.params_, batch, u_fut, self._forecast_config(u_fut.shape[1]))

    def _out(self, arr):
        return arr[..., 0] if self._squeeze else arr

    def predict(self, X, y, X_future):
        """Median of the sample paths, [S x p] (or [S x p x M])."""
        return self._out(self.sample_paths(X, y, X_future).median)

    def predict_quantiles(self, X, y, X_future, quantiles=None) -> dict:
        """Empirical quantiles of the sample paths keyed by level."""
        batch, u_fut = self._history(X, y, X_future)
        res = forecast(self.model_config_, self.params_, batch, u_fut,
                       self._forecast_config(u_fut.shape[1], quantiles))
        return {q: self._out(b) for q, b in res.bands.items()}

    def score(self, X, y, X_future, y_future) -> float:
        """Negative ND of the median forecast (higher is better)."""
        truth, _ = check_panel(y_future, "y_future")
        return -nd(truth, self.sample_paths(X, y, X_future).median)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_)

    def load_params(self, path, obs_dim: int, covariate_dim: int):
        """Restore fitted parameters from a checkpoint written by :meth:`save`."""
        self.model_config_ = self._model_config(obs_dim, covariate_dim)
        self.params_, _ = load_checkpoint(path)
        self.n_features_in_ = covariate_dim
        self._squeeze = obs_dim == 1
        return self
