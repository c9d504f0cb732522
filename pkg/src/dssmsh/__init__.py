"""Deep state-space forecasting with global-local shrinkage priors on the latent states."""

from .data import LinearSSMSpec, SeriesBatch, kalman_filter_loglik, simulate_linear_ssm, simulate_seasonal_panel
from .estimator import DSSMForecaster
from .evaluation import ablate_decoder, ablate_shrinkage, nd, nrmse, recovery_rate
from .forecasting import ForecastConfig, ForecastResult, forecast, latent_paths, rolling_forecast
from .model import ModelConfig, init_model_params, sequence_elbo, step_elbo
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DSSMForecaster",
    "ForecastConfig",
    "ForecastResult",
    "LinearSSMSpec",
    "ModelConfig",
    "SeriesBatch",
    "TrainConfig",
    "ablate_decoder",
    "ablate_shrinkage",
    "forecast",
    "init_model_params",
    "kalman_filter_loglik",
    "latent_paths",
    "nd",
    "nrmse",
    "recovery_rate",
    "rolling_forecast",
    "sequence_elbo",
    "simulate_linear_ssm",
    "simulate_seasonal_panel",
    "step_elbo",
    "train",
]
