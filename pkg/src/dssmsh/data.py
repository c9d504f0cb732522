"""Series containers, simulators, the exact Kalman oracle, CSV I/O and windowing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_START = datetime(2014, 1, 1)


@dataclass
class SeriesBatch:
    """A padded panel of series.

    Attributes
    ----------
    y : ndarray [batch x T x M]
    u : ndarray [batch x T x N]
    lengths : ndarray [batch]
        Valid prefix length per series; values past it are zero.
    scale : ndarray [batch]
        Standardization factor (1 when raw).
    ids : list of str
    latents : ndarray [batch x T x D], optional
        True latent paths for simulated data.
    """

    y: np.ndarray
    u: np.ndarray
    lengths: np.ndarray = None
    scale: np.ndarray = None
    ids: list = None
    latents: np.ndarray | None = None
    timestamps: list | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.y.ndim != 3 or self.u.ndim != 3 or self.y.shape[:2] != self.u.shape[:2]:
            raise ShapeError(f"y {self.y.shape} and u {self.u.shape} must be [batch x T x dim]")
        b, t = self.y.shape[:2]
        self.lengths = np.full(b, t, dtype=np.int64) if self.lengths is None else np.asarray(self.lengths, dtype=np.int64)
        self.scale = np.ones(b) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        self.ids = [str(i) for i in range(b)] if self.ids is None else [str(i) for i in self.ids]
        if self.lengths.shape != (b,) or self.scale.shape != (b,) or len(self.ids) != b:
            raise ShapeError("lengths, scale and ids must have one entry per series")
        if np.any(self.lengths > t) or np.any(self.lengths < 0):
            raise ShapeError("lengths must lie in [0, T]")

    def __len__(self):
        return self.y.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.y.shape[2]

    @property
    def covariate_dim(self) -> int:
        return self.u.shape[2]

    @property
    def length(self) -> int:
        return self.y.shape[1]

    def subset(self, index) -> "SeriesBatch":
        index = np.atleast_1d(np.asarray(index))
        return SeriesBatch(
            self.y[index], self.u[index], self.lengths[index], self.scale[index],
            [self.ids[i] for i in index],
            None if self.latents is None else self.latents[index],
            self.timestamps,
        )

    def slice_time(self, start: int, stop: int) -> "SeriesBatch":
        """Time window [start, stop) for every series; lengths are clipped."""
        lengths = np.clip(self.lengths - start, 0, stop - start)
        return SeriesBatch(
            self.y[:, start:stop], self.u[:, start:stop], lengths, self.scale.copy(), list(self.ids),
            None if self.latents is None else self.latents[:, start:stop],
            None if self.timestamps is None else self.timestamps[start:stop],
        )

    def mask(self) -> np.ndarray:
        return np.arange(self.length)[None, :] < self.lengths[:, None]


def concat_batches(batches: Sequence[SeriesBatch]) -> SeriesBatch:
    lat = None
    if all(b.latents is not None for b in batches):
        lat = np.concatenate([b.latents for b in batches])
    return SeriesBatch(
        np.concatenate([b.y for b in batches]), np.concatenate([b.u for b in batches]),
        np.concatenate([b.lengths for b in batches]), np.concatenate([b.scale for b in batches]),
        [i for b in batches for i in b.ids], lat,
    )


# linear state-space simulator


@dataclass(frozen=True)
class LinearSSMSpec:
    """beta_t = G beta_{t-1} + B u_t + eta_t,  y_t = F beta_t + eps_t,  beta_0 = 0.

    The state noise is iid per component with variance ``state_noise_var``.
    """

    F: tuple = ((1.0, 0.5),)
    G: tuple = ((0.7, 0.8), (0.0, 0.9))
    B: tuple = ((-1.0,), (0.9,))
    obs_noise_var: float = 1.0
    state_noise_var: float = 0.25
    covariate_low: float = -1.0
    covariate_high: float = 1.0

    @property
    def matrices(self):
        return np.array(self.F, float), np.array(self.G, float), np.array(self.B, float)

    @property
    def state_dim(self) -> int:
        return len(self.G)

    @property
    def obs_dim(self) -> int:
        return len(self.F)

    @property
    def covariate_dim(self) -> int:
        return len(self.B[0])


def _simulate_ssm(spec: LinearSSMSpec, n: int, T: int, rng: np.random.Generator):
    F, G, B = spec.matrices
    d, m, k = spec.state_dim, spec.obs_dim, spec.covariate_dim
    u = rng.uniform(spec.covariate_low, spec.covariate_high, size=(n, T, k))
    eta = rng.standard_normal((n, T, d)) * math.sqrt(spec.state_noise_var)
    eps = rng.standard_normal((n, T, m)) * math.sqrt(spec.obs_noise_var)
    beta = np.zeros((n, T, d))
    prev = np.zeros((n, d))
    for t in range(T):
        prev = prev @ G.T + u[:, t] @ B.T + eta[:, t]
        beta[:, t] = prev
    y = beta @ F.T + eps
    return y, u, beta


def simulate_linear_ssm(spec: LinearSSMSpec | None = None, n_train: int = 2560, n_test: int = 128,
                        T: int = 100, seed=0) -> tuple[SeriesBatch, SeriesBatch]:
    """Draw independent train/test panels; true latent paths are kept on both."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    spec = spec or LinearSSMSpec()
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    out = []
    for n, ss, prefix in ((n_train, train_ss, "train"), (n_test, test_ss, "test")):
        y, u, beta = _simulate_ssm(spec, n, T, np.random.default_rng(ss))
        out.append(SeriesBatch(y, u, ids=[f"{prefix}{i:05d}" for i in range(n)], latents=beta))
    return out[0], out[1]


class KalmanResult(NamedTuple):
    loglik: float
    means: np.ndarray
    covs: np.ndarray
    step_logliks: np.ndarray


def kalman_filter_loglik(spec: LinearSSMSpec, y, u) -> KalmanResult:
    """Exact log p(y_{1:T} | u_{1:T}) for a linear-Gaussian model with known zero initial state.

    ``y`` is [T x M] and ``u`` is [T x N]; returns filtered means/covariances
    and the per-step predictive log-densities, which sum to the total.
    """
    F, G, B = spec.matrices
    y = np.asarray(y, dtype=np.float64).reshape(-1, spec.obs_dim)
    u = np.asarray(u, dtype=np.float64).reshape(-1, spec.covariate_dim)
    if len(y) != len(u):
        raise ShapeError(f"y has {len(y)} steps but u has {len(u)}")
    d = spec.state_dim
    Qn = spec.state_noise_var * np.eye(d)
    R = spec.obs_noise_var * np.eye(spec.obs_dim)
    m = np.zeros(d)
    P = np.zeros((d, d))
    T = len(y)
    means, covs, steps = np.zeros((T, d)), np.zeros((T, d, d)), np.zeros(T)
    for t in range(T):
        m = G @ m + B @ u[t]
        P = G @ P @ G.T + Qn
        S = F @ P @ F.T + R
        S = 0.5 * (S + S.T)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise NonFiniteError(f"innovation covariance is not positive definite at step {t}") from None
        resid = y[t] - F @ m
        w = np.linalg.solve(L, resid)
        steps[t] = -0.5 * (len(resid) * LOG_2PI + w @ w) - np.log(np.diag(L)).sum()
        K = np.linalg.solve(S, F @ P).T
        m = m + K @ resid
        P = P - K @ F @ P
        P = 0.5 * (P + P.T)
        means[t], covs[t] = m, P
    return KalmanResult(float(steps.sum()), means, covs, steps)


# seasonal panel


def simulate_seasonal_panel(n_series: int = 100, T: int = 1000, period: int = 24, seed=0,
                            noise_std: float = 0.1, ar_coef: float = 0.5, trend_scale: float = 0.1,
                            scale_range=(1.0, 100.0)) -> SeriesBatch:
    """Positive seasonal series ``s * (1 + 0.5 sin(2 pi t / period) + trend + AR(1))``.

    Scales ``s`` are log-uniform over ``scale_range``; the trend is linear with a
    slope drawn so its total drift lies in [-trend_scale, trend_scale].
    Covariates are one-hot hour-of-period indicators.
    """
    if period < 2:
        raise ConfigError("period must be >= 2")
    rng = np.random.default_rng(seed)
    lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
    scales = np.exp(rng.uniform(lo, hi, size=n_series))
    slopes = rng.uniform(-trend_scale, trend_scale, size=n_series) / max(T - 1, 1)
    t = np.arange(T)
    ar = np.zeros((n_series, T))
    shocks = rng.standard_normal((n_series, T)) * noise_std
    prev = shocks[:, 0] / math.sqrt(max(1.0 - ar_coef ** 2, 1e-12))
    for i in range(T):
        prev = ar_coef * prev + shocks[:, i] if i else prev
        ar[:, i] = prev
    level = 1.0 + 0.5 * np.sin(2.0 * np.pi * (t % period) / period)[None, :] + slopes[:, None] * t[None, :] + ar
    y = (scales[:, None] * level)[:, :, None]
    u = np.broadcast_to(np.eye(period)[t % period], (n_series, T, period)).copy()
    return SeriesBatch(y, u, ids=[f"s{i:04d}" for i in range(n_series)])


# CSV panel I/O


def calendar_covariates(stamps: Sequence[datetime]) -> np.ndarray:
    """One-hot hour-of-day (24) followed by one-hot day-of-week (7)."""
    out = np.zeros((len(stamps), 31))
    for i, ts in enumerate(stamps):
        out[i, ts.hour] = 1.0
        out[i, 24 + ts.weekday()] = 1.0
    return out


def _parse_time(text: str, lineno: int, path) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise ValueError(f"{path}:{lineno}: cannot parse timestamp {text!r}") from None


def load_csv_panel(path, value_cols: Sequence[str] = ("value",), covariate_spec=None) -> SeriesBatch:
    """Read a long-format CSV (timestamp, series_id, value columns) into a panel.

    Parameters
    ----------
    path : path-like
    value_cols : sequence of str
        Response columns (M = len(value_cols)).
    covariate_spec : dict, optional
        ``{"calendar": bool, "columns": [...], "gap_flag": bool}``. Calendar
        covariates are hour-of-day and day-of-week one-hots; listed columns are
        copied as-is; the gap flag is a trailing covariate marking
        forward-filled steps. Defaults to calendar covariates plus the flag.

    All series are placed on the union time grid at the most common spacing;
    missing points are forward-filled (back-filled before the first
    observation) and flagged.
    """
    spec = {"calendar": True, "columns": [], "gap_flag": True}
    if covariate_spec:
        spec.update(covariate_spec)
    value_cols = list(value_cols)
    cov_cols = list(spec["columns"])
    records: dict[str, dict[datetime, list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        for needed in ["timestamp", "series_id", *value_cols, *cov_cols]:
            if needed not in col:
                raise ValueError(f"{path}:1: missing column {needed!r}")
        wanted = [col[c] for c in value_cols + cov_cols]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ts = _parse_time(row[col["timestamp"]], lineno, path)
            try:
                vals = [float(row[i]) for i in wanted]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
            series = records.setdefault(row[col["series_id"]], {})
            if ts in series:
                raise ValueError(f"{path}:{lineno}: duplicate timestamp {ts.isoformat()} for series {row[col['series_id']]!r}")
            series[ts] = vals
    if not records:
        raise ValueError(f"{path}: no data rows")
    stamps = sorted({ts for s in records.values() for ts in s})
    if len(stamps) > 1:
        diffs = np.diff([s.timestamp() for s in stamps])
        vals, counts = np.unique(diffs, return_counts=True)
        step = timedelta(seconds=float(vals[np.argmax(counts)]))
        grid = [stamps[0] + i * step for i in range(int(round((stamps[-1] - stamps[0]) / step)) + 1)]
    else:
        grid = stamps
    ids = sorted(records)
    n, T, m = len(ids), len(grid), len(value_cols)
    y = np.zeros((n, T, m))
    extra = np.zeros((n, T, len(cov_cols)))
    gap = np.zeros((n, T, 1))
    for i, sid in enumerate(ids):
        series = records[sid]
        first = series[min(series)]
        last = first
        for t, ts in enumerate(grid):
            vals = series.get(ts)
            if vals is None:
                gap[i, t, 0] = 1.0
                vals = last
            else:
                last = vals
            y[i, t] = vals[:m]
            extra[i, t] = vals[m:]
    parts = []
    if spec["calendar"]:
        parts.append(np.broadcast_to(calendar_covariates(grid), (n, T, 31)))
    if cov_cols:
        parts.append(extra)
    if spec["gap_flag"]:
        parts.append(gap)
    u = np.concatenate(parts, axis=2) if parts else np.zeros((n, T, 0))
    return SeriesBatch(y, u, ids=ids, timestamps=grid)


def write_csv_panel(batch: SeriesBatch, path, covariate_names: Sequence[str] = (),
                    start: datetime = DEFAULT_START, step: timedelta = timedelta(hours=1)) -> None:
    """Write a panel in long format; ``covariate_names`` label leading covariate columns to export."""
    m = batch.obs_dim
    value_cols = ["value"] if m == 1 else [f"value_{j}" for j in range(m)]
    covariate_names = list(covariate_names)
    stamps = batch.timestamps or [start + i * step for i in range(batch.length)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "series_id", *value_cols, *covariate_names])
        for i, sid in enumerate(batch.ids):
            for t in range(int(batch.lengths[i])):
                vals = [repr(float(v)) for v in batch.y[i, t]]
                covs = [repr(float(batch.u[i, t, j])) for j in range(len(covariate_names))]
                w.writerow([stamps[t].isoformat(), sid, *vals, *covs])


def write_latents_csv(batch: SeriesBatch, path) -> None:
    if batch.latents is None:
        raise ValueError("batch carries no latent paths")
    d = batch.latents.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "series_id", *[f"beta{j + 1}" for j in range(d)]])
        for i, sid in enumerate(batch.ids):
            for t in range(int(batch.lengths[i])):
                w.writerow([t, sid, *[repr(float(v)) for v in batch.latents[i, t]]])


def read_latents_csv(path, ids: Sequence[str], length: int) -> np.ndarray:
    rows: dict[str, dict[int, list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            rows.setdefault(row[1], {})[int(row[0])] = [float(v) for v in row[2:]]
    out = np.zeros((len(ids), length, len(header) - 2))
    for i, sid in enumerate(ids):
        for t, vals in rows.get(str(sid), {}).items():
            if t < length:
                out[i, t] = vals
    return out


# windowing


class Window(NamedTuple):
    series: int
    origin: int
    context: int
    horizon: int


def make_windows(batch: SeriesBatch, context_len: int, horizon: int, stride: int) -> list[Window]:
    """Sliding (context, target) windows; series shorter than context+horizon are skipped."""
    if context_len < 1 or horizon < 1 or stride < 1:
        raise ConfigError("context_len, horizon and stride must be >= 1")
    out = []
    skipped = 0
    span = context_len + horizon
    for i, n in enumerate(batch.lengths):
        if n < span:
            skipped += 1
            continue
        out.extend(Window(i, o, context_len, horizon) for o in range(0, int(n) - span + 1, stride))
    if skipped:
        log.warning("make_windows: skipped %d series shorter than %d steps", skipped, span)
    return out


def windows_to_batch(batch: SeriesBatch, windows: Sequence[Window]) -> SeriesBatch:
    """Stack windows (context followed by target) into one batch."""
    if not windows:
        raise ConfigError("no windows to stack")
    span = windows[0].context + windows[0].horizon
    idx = np.array([w.series for w in windows])
    t = np.array([w.origin for w in windows])[:, None] + np.arange(span)[None, :]
    lat = None if batch.latents is None else batch.latents[idx[:, None], t]
    return SeriesBatch(
        batch.y[idx[:, None], t], batch.u[idx[:, None], t], None, batch.scale[idx].copy(),
        [f"{batch.ids[w.series]}@{w.origin}" for w in windows], lat,
    )
