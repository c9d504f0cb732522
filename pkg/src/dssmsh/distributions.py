"""Reparameterized samplers and closed-form KL divergences.

Gamma and inverse-Gamma use the shape/scale convention:
``Gamma(a, b)`` has density proportional to ``x**(a-1) * exp(-x/b)`` and
``InvGamma(a, b)`` has density proportional to ``x**(-a-1) * exp(-b/x)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DomainError, NonFiniteError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
EXP_CLAMP = 700.0


class ExponentClampWarning(RuntimeWarning):
    """A log-normal exponent exceeded the overflow guard and was clamped."""


@dataclass
class NormalParams:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        self.mu, self.sigma = dc.as_tensor(self.mu), dc.as_tensor(self.sigma)
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}")


@dataclass
class LogNormalParams:
    """Log-normal with log-scale location ``mu`` and log-scale std ``sigma``.

    ``log_sigma`` may be supplied when the scale comes from a log-link head;
    it is then used directly instead of ``log(sigma)``.
    """

    mu: Tensor
    sigma: Tensor
    log_sigma: Tensor | None = None

    def __post_init__(self):
        self.mu, self.sigma = dc.as_tensor(self.mu), dc.as_tensor(self.sigma)
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}")

    @classmethod
    def from_log_sigma(cls, mu, log_sigma) -> "LogNormalParams":
        log_sigma = dc.as_tensor(log_sigma)
        return cls(mu, dc.exp(log_sigma), log_sigma)

    def log_scale(self) -> Tensor:
        return self.log_sigma if self.log_sigma is not None else dc.log(self.sigma)


@dataclass(frozen=True)
class GammaParams:
    a: float
    b: float

    def __post_init__(self):
        _check_hyper(self.a, self.b)


@dataclass(frozen=True)
class InvGammaParams:
    a: float
    b: float

    def __post_init__(self):
        _check_hyper(self.a, self.b)


def _check_hyper(a, b):
    if not (a > 0 and b > 0):
        raise DomainError(f"shape and scale must be positive, got a={a}, b={b}")


def _check_positive(t: Tensor, what: str) -> None:
    if np.any(t.data <= 0):
        raise DomainError(f"{what} must be strictly positive (min {t.data.min():.6g})")


def _noise(noise, shape) -> Tensor:
    arr = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"noise shape {arr.shape} does not match parameter shape {shape}")
    return Tensor._wrap(arr)


def sample_normal_reparam(p: NormalParams, noise) -> Tensor:
    """mu + sigma * noise; differentiable in (mu, sigma), constant in noise."""
    _check_positive(p.sigma, "normal sigma")
    return p.mu + p.sigma * _noise(noise, p.mu.shape)


def sample_lognormal_reparam(p: LogNormalParams, noise) -> Tensor:
    """exp(mu + sigma * noise), with the exponent clamped at 700."""
    _check_positive(p.sigma, "log-normal sigma")
    expo = p.mu + p.sigma * _noise(noise, p.mu.shape)
    if np.any(expo.data > EXP_CLAMP):
        warnings.warn(
            f"log-normal exponent {expo.data.max():.4g} clamped at {EXP_CLAMP}",
            ExponentClampWarning,
            stacklevel=2,
        )
        expo = dc.clamp_max(expo, EXP_CLAMP)
    return dc.exp(expo)


def kl_normal_normal(q: NormalParams, p: NormalParams, axis: int | None = -1) -> Tensor:
    """KL(q || p) for diagonal Normals, summed over ``axis`` (None keeps elementwise)."""
    if q.mu.shape != p.mu.shape:
        raise ShapeError(f"KL between shapes {q.mu.shape} and {p.mu.shape}")
    _check_positive(q.sigma, "q sigma")
    _check_positive(p.sigma, "p sigma")
    ratio = q.sigma / p.sigma
    diff = (q.mu - p.mu) / p.sigma
    kl = 0.5 * (dc.square(ratio) + dc.square(diff)) - dc.log(ratio) - 0.5
    return kl if axis is None else dc.sum(kl, axis=axis)


def _ln_entropy_terms(q: LogNormalParams) -> Tensor:
    # -0.5 * log(2 pi e sigma^2)
    return -0.5 * (LOG_2PI + 1.0) - q.log_scale()


def kl_lognormal_gamma(q: LogNormalParams, a: float, b: float) -> Tensor:
    """Elementwise KL(LN(mu, sigma) || Gamma(a, scale=b))."""
    _check_hyper(a, b)
    _check_positive(q.sigma, "log-normal sigma")
    mean_x = dc.exp(q.mu + 0.5 * dc.square(q.sigma))
    const = math.lgamma(a) + a * math.log(b)
    return const - a * q.mu + _ln_entropy_terms(q) + mean_x * (1.0 / b)


def kl_lognormal_invgamma(q: LogNormalParams, a: float, b: float) -> Tensor:
    """Elementwise KL(LN(mu, sigma) || InvGamma(a, scale=b))."""
    _check_hyper(a, b)
    _check_positive(q.sigma, "log-normal sigma")
    mean_inv_x = dc.exp(0.5 * dc.square(q.sigma) - q.mu)
    const = math.lgamma(a) - a * math.log(b)
    return const + a * q.mu + _ln_entropy_terms(q) + mean_inv_x * b


# numpy log-densities, used by samplers and Monte Carlo checks


def normal_logpdf(x, mu, sigma):
    z = (x - mu) / sigma
    return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z


def lognormal_logpdf(x, mu, sigma):
    lx = np.log(x)
    return normal_logpdf(lx, mu, sigma) - lx


def mc_kl_oracle(
    q_sampler: Callable,
    q_logpdf: Callable,
    p_logpdf: Callable,
    n: int,
    seed,
    return_stderr: bool = False,
):
    """Monte Carlo estimate of KL(q || p) = E_q[log q(x) - log p(x)].

    ``q_sampler(rng, n)`` draws ``n`` samples; the log-densities are
    vectorized numpy callables.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = q_sampler(rng, n)
    with np.errstate(all="ignore"):
        terms = np.asarray(q_logpdf(x), dtype=np.float64) - np.asarray(p_logpdf(x), dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        raise NonFiniteError(f"non-finite log-density at sample index {int(bad[0])} (x={x[bad[0]]!r})")
    est = float(terms.mean())
    if return_stderr:
        return est, float(terms.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return est
