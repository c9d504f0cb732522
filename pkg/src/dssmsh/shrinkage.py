"""Global-local shrinkage: half-Cauchy scales through Gamma x InverseGamma products.

Each squared half-Cauchy scale is written as ``alpha * beta`` with
``alpha ~ Gamma(0.5, s)`` and ``beta ~ InvGamma(0.5, 1)``; the approximate
posteriors of both factors are log-normal, whose KL to the prior factors is
available in closed form. The regularized global scale caps the effective
prior variance ``tau*^2 lambda^2`` at ``c^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .distributions import (
    LogNormalParams,
    kl_lognormal_gamma,
    kl_lognormal_invgamma,
    sample_lognormal_reparam,
)
from .errors import DomainError, ShapeError
from .neuralnet import MLPConfig, ParameterStore, mlp_forward

LOCAL_ALPHA_PRIOR = (0.5, 1.0)
LOCAL_BETA_PRIOR = (0.5, 1.0)
GLOBAL_HEADS = ("alpha_tau", "beta_tau", "c")


@dataclass(frozen=True)
class ShrinkageHyper:
    tau0: float = 1.0
    c0: float = 2.0
    c1: float = 1.0

    def __post_init__(self):
        if not (self.tau0 > 0 and self.c0 > 0 and self.c1 > 0):
            raise DomainError(f"shrinkage hyperparameters must be positive: {self}")


@dataclass
class LocalShrinkageSample:
    alpha: Tensor
    beta: Tensor
    lambda_sq: Tensor
    q_alpha: LogNormalParams | None = None
    q_beta: LogNormalParams | None = None


@dataclass
class GlobalShrinkageSample:
    alpha_tau: Tensor
    beta_tau: Tensor
    tau_sq: Tensor
    c_sq: Tensor
    q_alpha_tau: LogNormalParams | None = None
    q_beta_tau: LogNormalParams | None = None
    q_c: LogNormalParams | None = None


def regularized_tau_star_sq(tau_sq, c_sq, lambda_sq) -> Tensor:
    """tau*^2 = c^2 tau^2 / (c^2 + tau^2 lambda^2), broadcast over the latent axis."""
    tau_sq, c_sq, lambda_sq = dc.as_tensor(tau_sq), dc.as_tensor(c_sq), dc.as_tensor(lambda_sq)
    for name, t in (("tau^2", tau_sq), ("c^2", c_sq), ("lambda^2", lambda_sq)):
        if np.any(t.data <= 0):
            raise DomainError(f"{name} must be strictly positive (min {t.data.min():.6g})")
    return (c_sq * tau_sq) / (c_sq + tau_sq * lambda_sq)


def prior_local_kl(q_alpha: LogNormalParams, q_beta: LogNormalParams) -> Tensor:
    """Sum over the latent axis of KL(q_alpha || G(0.5, 1)) + KL(q_beta || IG(0.5, 1))."""
    kl = kl_lognormal_gamma(q_alpha, *LOCAL_ALPHA_PRIOR) + kl_lognormal_invgamma(q_beta, *LOCAL_BETA_PRIOR)
    return dc.sum(kl, axis=-1)


def prior_global_kl(
    q_alpha_tau: LogNormalParams,
    q_beta_tau: LogNormalParams,
    q_c: LogNormalParams,
    hyper: ShrinkageHyper,
) -> Tensor:
    """KL of the three global log-normal posteriors to their priors.

    Priors: alpha_tau ~ G(0.5, tau0^2), beta_tau ~ IG(0.5, 1), c^2 ~ IG(c0, c1).
    """
    return (
        kl_lognormal_gamma(q_alpha_tau, 0.5, hyper.tau0 ** 2)
        + kl_lognormal_invgamma(q_beta_tau, 0.5, 1.0)
        + kl_lognormal_invgamma(q_c, hyper.c0, hyper.c1)
    )


def split_local_head(head: Tensor) -> tuple[LogNormalParams, LogNormalParams]:
    """Split a [batch x 4Q] head into log-normal posteriors for alpha and beta.

    Column blocks are (mu_alpha, log sigma_alpha, mu_beta, log sigma_beta).
    """
    if head.ndim != 2 or head.shape[1] % 4:
        raise ShapeError(f"local shrinkage head must be [batch x 4Q], got {head.shape}")
    q = head.shape[1] // 4
    q_alpha = LogNormalParams.from_log_sigma(head[:, :q], head[:, q:2 * q])
    q_beta = LogNormalParams.from_log_sigma(head[:, 2 * q:3 * q], head[:, 3 * q:])
    return q_alpha, q_beta


def sample_local_posterior(head: Tensor, noise_alpha, noise_beta) -> LocalShrinkageSample:
    q_alpha, q_beta = split_local_head(head)
    alpha = sample_lognormal_reparam(q_alpha, noise_alpha)
    beta = sample_lognormal_reparam(q_beta, noise_beta)
    return LocalShrinkageSample(alpha, beta, alpha * beta, q_alpha, q_beta)


def global_head_config(obs_dim: int, hidden_dims) -> MLPConfig:
    return MLPConfig(input_dim=obs_dim, hidden_dims=tuple(hidden_dims), output_dim=2)


def global_posteriors(pooled_stats: Tensor, params: ParameterStore, head_cfg: MLPConfig,
                      prefix: str = "inf.global") -> dict[str, LogNormalParams]:
    out = {}
    for name in GLOBAL_HEADS:
        h = mlp_forward(head_cfg, params, pooled_stats, prefix=f"{prefix}.{name}")
        out[name] = LogNormalParams.from_log_sigma(h[:, 0:1], h[:, 1:2])
    return out


def sample_global_posterior(pooled_stats: Tensor, params: ParameterStore, head_cfg: MLPConfig,
                            noise, prefix: str = "inf.global") -> GlobalShrinkageSample:
    """Draw (alpha_tau, beta_tau, c^2) from their log-normal posteriors.

    ``pooled_stats`` is the per-series time-mean of the observed response,
    shape [batch x M]; ``noise`` is standard normal of shape [batch x 3].
    Every returned tensor has shape [batch x 1].
    """
    noise = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if noise.shape != (pooled_stats.shape[0], 3):
        raise ShapeError(f"global noise must be [{pooled_stats.shape[0]} x 3], got {noise.shape}")
    qs = global_posteriors(pooled_stats, params, head_cfg, prefix)
    a_tau = sample_lognormal_reparam(qs["alpha_tau"], noise[:, 0:1])
    b_tau = sample_lognormal_reparam(qs["beta_tau"], noise[:, 1:2])
    c_sq = sample_lognormal_reparam(qs["c"], noise[:, 2:3])
    return GlobalShrinkageSample(a_tau, b_tau, a_tau * b_tau, c_sq,
                                 qs["alpha_tau"], qs["beta_tau"], qs["c"])


def sample_local_prior(rng: np.random.Generator, shape) -> np.ndarray:
    """Draw lambda^2 = alpha * beta from the Gamma x InverseGamma prior."""
    alpha = rng.gamma(LOCAL_ALPHA_PRIOR[0], LOCAL_ALPHA_PRIOR[1], size=shape)
    beta = LOCAL_BETA_PRIOR[1] / rng.gamma(LOCAL_BETA_PRIOR[0], 1.0, size=shape)
    return alpha * beta
