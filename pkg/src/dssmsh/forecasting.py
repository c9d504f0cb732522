"""Monte Carlo forecasting by posterior filtering over the history and generative rollout.

Each sample path owns a random stream keyed by (seed, stream, series index,
path index), and paths are evaluated in fixed-size series chunks, so results
do not depend on the number of worker threads.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import SeriesBatch
from .diffcore import Tensor
from .errors import ConfigError, ShapeError
from .model import (
    ModelConfig,
    StepState,
    advance_rnn,
    decoder,
    generative_z_params,
    inference_z_params,
    initial_state,
    local_head,
    pooled_response,
)
from .neuralnet import ParameterStore, write_framed
from .shrinkage import regularized_tau_star_sq, sample_global_posterior, sample_local_prior, split_local_head
from .training import standardize

SERIES_CHUNK = 8
LAMBDA_SOURCES = ("inference", "prior")


@dataclass(frozen=True)
class ForecastConfig:
    """Monte Carlo settings.

    ``lambda_source`` selects where local shrinkage over the horizon comes
    from: the inference posterior q(lambda | z_{t-1}, h_t) or the
    Gamma x InverseGamma prior. ``deterministic`` replaces every noise draw by
    zero (posterior means and log-normal medians).
    """

    horizon: int = 20
    num_samples: int = 50
    quantiles: tuple = (0.05, 0.5, 0.95)
    seed: int = 0
    lambda_source: str = "inference"
    deterministic: bool = False
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        if self.horizon < 1 or self.num_samples < 1:
            raise ConfigError("horizon and num_samples must be >= 1")
        if any(not 0 < q < 1 for q in self.quantiles):
            raise ConfigError("quantiles must lie in (0, 1)")
        if self.lambda_source not in LAMBDA_SOURCES:
            raise ConfigError(f"lambda_source must be one of {LAMBDA_SOURCES}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class ForecastAblation:
    """Interventions applied during the forecast rollout.

    ``ignore_scale`` [S x p x Q] replaces tau* lambda by 1 at the flagged
    coordinates; ``zero_latent`` [S x p x Q] sets those latents to 0. Both
    masks are shared by all sample paths of a series.
    """

    ignore_scale: np.ndarray | None = None
    zero_latent: np.ndarray | None = None

    def subset(self, idx) -> "ForecastAblation":
        return ForecastAblation(
            None if self.ignore_scale is None else self.ignore_scale[idx],
            None if self.zero_latent is None else self.zero_latent[idx],
        )


@dataclass
class ForecastResult:
    """Sample paths for S series.

    Attributes
    ----------
    samples : ndarray [S x n x p x M]
        De-standardized response paths.
    bands : dict of float -> ndarray [S x p x M]
    scale : ndarray [S]
    latents : ndarray [S x n x p x Q]
        Latent paths (standardized space) over the horizon.
    shrink_scale : ndarray [S x n x p x Q]
        tau* lambda over the horizon, before any ablation.
    start : ndarray [S]
        Index of the first forecast step in each series' time axis.
    """

    samples: np.ndarray
    bands: dict
    scale: np.ndarray
    latents: np.ndarray
    shrink_scale: np.ndarray
    ids: list
    start: np.ndarray = None

    @property
    def median(self) -> np.ndarray:
        return np.median(self.samples, axis=1)

    @property
    def horizon(self) -> int:
        return self.samples.shape[2]


def _bands(samples: np.ndarray, quantiles) -> dict:
    qs = np.quantile(samples, sorted(quantiles), axis=1)
    return {q: qs[i] for i, q in enumerate(sorted(quantiles))}


class _PathNoise:
    """Per-path standard normals.

    Each path owns two generators keyed by (seed, stream, series, path): one
    for the global draw and the history, one for the horizon. A series'
    draws therefore do not depend on panel padding or on the horizon length.
    """

    def __init__(self, cfg: ModelConfig, fcfg: ForecastConfig, stream: int, series_index: Sequence[int],
                 hist_len: int, horizon: int):
        q, m = cfg.latent_dim, cfg.obs_dim
        n = fcfg.num_samples
        self.q, self.m, self.hist_len, self.horizon = q, m, hist_len, horizon
        rows = len(series_index) * n
        self.past = np.zeros((rows, 3 + hist_len * 3 * q))
        self.future = np.zeros((rows, horizon * (3 * q + m)))
        self.prior_lambda = None
        if fcfg.lambda_source == "prior":
            self.prior_lambda = np.ones((rows, horizon, q))
        if fcfg.deterministic:
            return
        r = 0
        for s in series_index:
            for i in range(n):
                key = [fcfg.seed, stream, int(s), i]
                self.past[r] = np.random.default_rng(key + [0]).standard_normal(self.past.shape[1])
                rng = np.random.default_rng(key + [1])
                self.future[r] = rng.standard_normal(self.future.shape[1])
                if self.prior_lambda is not None:
                    self.prior_lambda[r] = sample_local_prior(rng, (horizon, q))
                r += 1

    @property
    def glob(self):
        return self.past[:, :3]

    def hist(self, t):
        q = self.q
        off = 3 + t * 3 * q
        blk = self.past[:, off:off + 3 * q]
        return blk[:, :q], blk[:, q:2 * q], blk[:, 2 * q:]

    def step(self, k):
        q, m = self.q, self.m
        off = k * (3 * q + m)
        blk = self.future[:, off:off + 3 * q + m]
        return blk[:, :q], blk[:, q:2 * q], blk[:, 2 * q:3 * q], blk[:, 3 * q:]


def _lognormal_draw(q_params, noise) -> np.ndarray:
    return np.exp(np.minimum(q_params.mu.data + q_params.sigma.data * noise, 700.0))


def _freeze(mask: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
    return Tensor._wrap(np.where(mask[:, None], new.data, old.data))


def _filter_history(cfg, params, y, u, lengths, noise: _PathNoise):
    """Posterior pass over the history; returns the final state, globals and latent draws."""
    rows, T = y.shape[:2]
    glob = sample_global_posterior(Tensor._wrap(pooled_response(y, lengths)), params, cfg.global_head, noise.glob)
    tau_sq, c_sq = glob.tau_sq.data, glob.c_sq.data
    state = initial_state(cfg, rows)
    z_hist = np.zeros((rows, T, cfg.latent_dim))
    heads = cfg.heads()
    for t in range(T):
        e_a, e_b, e_z = noise.hist(t)
        y_t = Tensor._wrap(y[:, t])
        h_layers = advance_rnn(cfg, params, state, Tensor._wrap(u[:, t]))
        h_t = h_layers[-1]
        qa, qb = split_local_head(local_head(cfg, params, state.z, h_t, heads))
        lam_sq = _lognormal_draw(qa, e_a) * _lognormal_draw(qb, e_b)
        scale = np.sqrt(regularized_tau_star_sq(tau_sq, c_sq, lam_sq).data * lam_sq)
        qz = inference_z_params(cfg, params, state.z, y_t, h_t, heads)
        z = Tensor._wrap((qz.mu.data + qz.sigma.data * e_z) * scale)
        live = t < lengths
        if live.all():
            state = StepState(h_layers, z, y_t)
        else:
            state = StepState([_freeze(live, n, o) for n, o in zip(h_layers, state.h)],
                              _freeze(live, z, state.z), _freeze(live, y_t, state.y_prev))
        z_hist[:, t] = z.data
    return state, (tau_sq, c_sq), z_hist


def _rollout(cfg, params, state, globs, u_future, noise: _PathNoise, fcfg: ForecastConfig,
             ignore_scale=None, zero_latent=None):
    rows = u_future.shape[0]
    p, q, m = noise.horizon, cfg.latent_dim, cfg.obs_dim
    tau_sq, c_sq = globs
    ys = np.zeros((rows, p, m))
    zs = np.zeros((rows, p, q))
    scales = np.zeros((rows, p, q))
    heads = cfg.heads()
    for k in range(p):
        e_a, e_b, e_z, e_y = noise.step(k)
        h_layers = advance_rnn(cfg, params, state, Tensor._wrap(u_future[:, k]))
        h_t = h_layers[-1]
        if noise.prior_lambda is not None:
            lam_sq = noise.prior_lambda[:, k]
        else:
            qa, qb = split_local_head(local_head(cfg, params, state.z, h_t, heads))
            lam_sq = _lognormal_draw(qa, e_a) * _lognormal_draw(qb, e_b)
        scale = np.sqrt(regularized_tau_star_sq(tau_sq, c_sq, lam_sq).data * lam_sq)
        scales[:, k] = scale
        if ignore_scale is not None:
            scale = np.where(ignore_scale[:, k], 1.0, scale)
        pz = generative_z_params(cfg, params, h_t, state.z, heads)
        z = (pz.mu.data + pz.sigma.data * e_z) * scale
        if zero_latent is not None:
            z = np.where(zero_latent[:, k], 0.0, z)
        zt = Tensor._wrap(z)
        py = decoder(cfg, params, zt, heads)
        y_k = py.mu.data + py.sigma.data * e_y
        ys[:, k], zs[:, k] = y_k, z
        state = StepState(h_layers, zt, Tensor._wrap(y_k))
    return ys, zs, scales


def _expand(arr: np.ndarray, n: int) -> np.ndarray:
    return np.repeat(arr, n, axis=0)


def _forecast_chunk(cfg, params, hist: SeriesBatch, u_future, fcfg, series_index, stream, ablation):
    n = fcfg.num_samples
    p = u_future.shape[1]
    noise = _PathNoise(cfg, fcfg, stream, series_index, hist.length, p)
    y, u, lengths = _expand(hist.y, n), _expand(hist.u, n), _expand(hist.lengths, n)
    state, globs, z_hist = _filter_history(cfg, params, y, u, lengths, noise)
    kw = {}
    if ablation is not None:
        if ablation.ignore_scale is not None:
            kw["ignore_scale"] = _expand(ablation.ignore_scale, n)
        if ablation.zero_latent is not None:
            kw["zero_latent"] = _expand(ablation.zero_latent, n)
    ys, zs, scales = _rollout(cfg, params, state, globs, _expand(u_future, n), noise, fcfg, **kw)
    s = len(series_index)
    return (ys.reshape(s, n, p, -1), zs.reshape(s, n, p, -1), scales.reshape(s, n, p, -1),
            z_hist.reshape(s, n, hist.length, -1))


def _run_chunks(fn, n_series: int, threads: int):
    chunks = [np.arange(a, min(a + SERIES_CHUNK, n_series)) for a in range(0, n_series, SERIES_CHUNK)]
    if threads == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def _check_inputs(cfg: ModelConfig, history: SeriesBatch, u_future, horizon: int):
    u_future = np.asarray(u_future, dtype=np.float64)
    if u_future.ndim == 2:
        u_future = u_future[None]
    if u_future.shape[0] != len(history) or u_future.shape[2] != cfg.covariate_dim:
        raise ShapeError(f"future covariates {u_future.shape} do not match {len(history)} series x N={cfg.covariate_dim}")
    if u_future.shape[1] < horizon:
        raise ShapeError(f"future covariates cover {u_future.shape[1]} steps but the horizon is {horizon}")
    if history.obs_dim != cfg.obs_dim or history.covariate_dim != cfg.covariate_dim:
        raise ShapeError("history dimensions do not match the model")
    if np.any(history.lengths < 1):
        raise ShapeError("every history needs at least one observed step")
    return u_future[:, :horizon]


def forecast(cfg: ModelConfig, params: ParameterStore, history: SeriesBatch, future_covariates,
             fcfg: ForecastConfig, ablation: ForecastAblation | None = None, stream: int = 0) -> ForecastResult:
    """Sample ``fcfg.num_samples`` response paths ``fcfg.horizon`` steps past each history.

    ``history`` holds raw (unstandardized) series; each is scaled by
    1 + mean|y| of its history and forecasts are mapped back by the same
    factor. ``future_covariates`` is [S x p x N] (or [p x N] for one series).
    """
    return forecast_with_latents(cfg, params, history, future_covariates, fcfg, ablation, stream)[0]


def latent_paths(cfg: ModelConfig, params: ParameterStore, history: SeriesBatch, fcfg: ForecastConfig,
                 stream: int = 0) -> np.ndarray:
    """Posterior latent sample paths over the history, [S x n x T x Q]."""
    hist, _ = standardize(history)
    u_dummy = np.zeros((len(hist), 1, cfg.covariate_dim))
    one = ForecastConfig(1, fcfg.num_samples, fcfg.quantiles, fcfg.seed, fcfg.lambda_source,
                         fcfg.deterministic, fcfg.threads)
    with dc.no_grad():
        parts = _run_chunks(
            lambda idx: _forecast_chunk(cfg, params, hist.subset(idx), u_dummy[idx], one, idx, stream, None),
            len(hist), fcfg.threads,
        )
    return np.concatenate([pt[3] for pt in parts])


def forecast_with_latents(cfg, params, history: SeriesBatch, future_covariates, fcfg: ForecastConfig,
                          ablation=None, stream: int = 0):
    """Like :func:`forecast` but also returns the history latent paths from the same draws."""
    u_future = _check_inputs(cfg, history, future_covariates, fcfg.horizon)
    hist, scale = standardize(history)
    with dc.no_grad():
        def run(idx):
            abl = None if ablation is None else ablation.subset(idx)
            return _forecast_chunk(cfg, params, hist.subset(idx), u_future[idx], fcfg, idx, stream, abl)

        parts = _run_chunks(run, len(hist), fcfg.threads)
    samples = np.concatenate([pt[0] for pt in parts]) * scale[:, None, None, None]
    res = ForecastResult(samples, _bands(samples, fcfg.quantiles), scale,
                         np.concatenate([pt[1] for pt in parts]), np.concatenate([pt[2] for pt in parts]),
                         list(history.ids), history.lengths.copy())
    return res, np.concatenate([pt[3] for pt in parts])


def rolling_forecast(cfg: ModelConfig, params: ParameterStore, series: SeriesBatch, history_len: int,
                     window: int, horizon_total: int, fcfg: ForecastConfig) -> ForecastResult:
    """Forecast ``window`` steps at a time, appending the true observations after each window."""
    if window > horizon_total:
        raise ConfigError(f"window {window} exceeds total horizon {horizon_total}")
    if window < 1 or history_len < 1:
        raise ConfigError("window and history_len must be >= 1")
    if history_len + horizon_total > series.length:
        raise ShapeError(f"series of length {series.length} cannot cover {history_len} + {horizon_total} steps")
    results = []
    k = 0
    for origin in range(history_len, history_len + horizon_total, window):
        p = min(window, history_len + horizon_total - origin)
        hist = series.slice_time(0, origin)
        hist.lengths = np.minimum(series.lengths, origin)
        step_cfg = ForecastConfig(p, fcfg.num_samples, fcfg.quantiles, fcfg.seed, fcfg.lambda_source,
                                  fcfg.deterministic, fcfg.threads)
        results.append(forecast(cfg, params, hist, series.u[:, origin:origin + p], step_cfg, stream=k))
        k += 1
    samples = np.concatenate([r.samples for r in results], axis=2)
    return ForecastResult(
        samples=samples,
        bands=_bands(samples, fcfg.quantiles),
        scale=results[0].scale,
        latents=np.concatenate([r.latents for r in results], axis=2),
        shrink_scale=np.concatenate([r.shrink_scale for r in results], axis=2),
        ids=list(series.ids),
        start=np.full(len(series), history_len),
    )


# exports


def write_forecast_csv(result: ForecastResult, path) -> None:
    """Quantile bands in long format: t, series_id, quantile, dim, value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "series_id", "quantile", "dim", "value"])
        for s, sid in enumerate(result.ids):
            start = int(result.start[s]) if result.start is not None else 0
            for k in range(result.horizon):
                for q in sorted(result.bands):
                    for d in range(result.samples.shape[3]):
                        w.writerow([start + k, sid, repr(q), d, repr(float(result.bands[q][s, k, d]))])


def read_forecast_csv(path) -> dict:
    """Parse a band CSV into {(series_id, quantile): {(t, dim): value}}."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (row["series_id"], float(row["quantile"]))
            out.setdefault(key, {})[(int(row["t"]), int(row["dim"]))] = float(row["value"])
    return out


def write_samples(result: ForecastResult, path) -> None:
    """Raw sample paths, one [n x p x M] block per series, in checkpoint framing."""
    write_framed(path, [(f"samples/{sid}", result.samples[s]) for s, sid in enumerate(result.ids)])
