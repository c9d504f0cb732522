"""Forecast metrics, credible-band recovery, latent alignment, baselines and ablations."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .data import SeriesBatch
from .errors import ConfigError, DomainError, ShapeError
from .forecasting import ForecastAblation, ForecastConfig, ForecastResult, forecast
from .model import ModelConfig
from .neuralnet import ParameterStore

DEFAULT_LEVELS = (0.05, 0.10, 0.25, 0.50)
SHRINKAGE_MODES = ("random_remove", "threshold_lowest")


def _pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"truth {y_true.shape} and prediction {y_pred.shape} differ")
    return y_true, y_pred


def nd(y_true, y_pred) -> float:
    """Normalized deviation: sum |y - y_hat| / sum |y|."""
    y_true, y_pred = _pair(y_true, y_pred)
    denom = np.abs(y_true).sum()
    if denom == 0:
        raise ZeroDivisionError("ND is undefined for an all-zero truth")
    return float(np.abs(y_true - y_pred).sum() / denom)


def nrmse(y_true, y_pred) -> float:
    """Root mean squared error divided by the mean absolute truth."""
    y_true, y_pred = _pair(y_true, y_pred)
    denom = np.abs(y_true).mean()
    if denom == 0:
        raise ZeroDivisionError("normalized RMSE is undefined for an all-zero truth")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)) / denom)


class Recovery(NamedTuple):
    per_t: np.ndarray
    mean: float


def recovery_rate(true_paths, sample_paths, level: float = 0.9) -> Recovery:
    """Share of coordinates whose truth lies in the central ``level`` interval of the samples.

    Parameters
    ----------
    true_paths : array [T x D]
    sample_paths : array [n x T x D]
    level : float
        Coverage of the interval; bounds are the empirical
        (1 - level)/2 and (1 + level)/2 quantiles, endpoints included.
    """
    if not 0 < level < 1:
        raise DomainError(f"level must lie in (0, 1), got {level}")
    truth = np.asarray(true_paths, dtype=np.float64)
    samples = np.asarray(sample_paths, dtype=np.float64)
    if samples.ndim != truth.ndim + 1 or samples.shape[1:] != truth.shape:
        raise ShapeError(f"samples {samples.shape} do not match truth {truth.shape}")
    if samples.shape[0] < 2:
        raise DomainError("recovery rate needs at least 2 samples")
    lo, hi = np.quantile(samples, [(1 - level) / 2, (1 + level) / 2], axis=0)
    inside = (truth >= lo) & (truth <= hi)
    per_t = inside.reshape(inside.shape[0], -1).mean(axis=1)
    return Recovery(per_t, float(inside.mean()))


@dataclass
class AlignmentMap:
    """Affine map from model latents [.. x Q] to reference coordinates [.. x D]."""

    weight: np.ndarray
    bias: np.ndarray
    r2_fit: float

    def apply(self, paths) -> np.ndarray:
        return np.asarray(paths, dtype=np.float64) @ self.weight + self.bias


def _r2(truth, pred) -> float:
    ss_res = np.sum((truth - pred) ** 2)
    ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2)
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else float("nan")


def fit_alignment(true_paths, mean_paths) -> AlignmentMap:
    """Least-squares affine map from ``mean_paths`` [T x Q] onto ``true_paths`` [T x D]."""
    truth = np.asarray(true_paths, dtype=np.float64)
    z = np.asarray(mean_paths, dtype=np.float64)
    if truth.ndim != 2 or z.ndim != 2 or truth.shape[0] != z.shape[0]:
        raise ShapeError(f"alignment needs [T x D] and [T x Q], got {truth.shape} and {z.shape}")
    T, q = z.shape
    if T < 2 * q:
        raise ShapeError(f"alignment needs T >= 2Q, got T={T}, Q={q}")
    design = np.hstack([z, np.ones((T, 1))])
    rank = np.linalg.matrix_rank(design)
    if rank < q + 1:
        raise np.linalg.LinAlgError(f"rank-deficient alignment design (rank {rank} < {q + 1})")
    coef, *_ = np.linalg.lstsq(design, truth, rcond=None)
    amap = AlignmentMap(coef[:q], coef[q], 0.0)
    amap.r2_fit = _r2(truth, amap.apply(z))
    return amap


def align_latents(true_paths, mean_paths, fit_len: int | None = None):
    """Fit the alignment on the first ``fit_len`` steps and apply it to the whole path.

    Returns the aligned [T x D] path and the :class:`AlignmentMap`.
    """
    truth = np.asarray(true_paths, dtype=np.float64)
    z = np.asarray(mean_paths, dtype=np.float64)
    n = truth.shape[0] if fit_len is None else fit_len
    amap = fit_alignment(truth[:n], z[:n])
    return amap.apply(z), amap


def out_of_sample_r2(true_paths, mean_paths, fit_len: int) -> float:
    aligned, _ = align_latents(true_paths, mean_paths, fit_len)
    return _r2(np.asarray(true_paths, dtype=np.float64)[fit_len:], aligned[fit_len:])


def persistence_baseline(context, horizon: int, period: int | None = None) -> np.ndarray:
    """Seasonal-naive forecast when the context spans a period, last value otherwise.

    ``context`` is [S x T x M] (or [T x M]); the result is [S x horizon x M].
    """
    y = np.asarray(context, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    T = y.shape[1]
    if T < 1 or horizon < 1:
        raise ShapeError("persistence needs a non-empty context and horizon >= 1")
    if period is not None and period >= 1 and T >= period:
        idx = T - period + (np.arange(horizon) % period)
        return y[:, idx]
    return np.repeat(y[:, -1:], horizon, axis=1)


# reports


@dataclass
class MetricReport:
    nd: float
    rmse: float
    num_samples: int
    per_series: list = field(default_factory=list)

    def __post_init__(self):
        if self.nd < 0 or self.rmse < 0:
            raise DomainError("metrics must be non-negative")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series_id", "nd", "rmse"])
            w.writerow(["ALL", repr(self.nd), repr(self.rmse)])
            for row in self.per_series:
                w.writerow([row["series_id"], repr(row["nd"]), repr(row["rmse"])])


def _safe(fn, a, b) -> float:
    try:
        return fn(a, b)
    except ZeroDivisionError:
        return float("nan")


def evaluate_point(y_true, y_pred, ids: Sequence | None = None, num_samples: int = 1) -> MetricReport:
    """Metrics for a point prediction [S x p x M]; per-series entries are NaN for all-zero series."""
    y_true, y_pred = _pair(y_true, y_pred)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(y_true))]
    per = [{"series_id": str(sid), "nd": _safe(nd, y_true[s], y_pred[s]), "rmse": _safe(nrmse, y_true[s], y_pred[s])}
           for s, sid in enumerate(ids)]
    return MetricReport(nd(y_true, y_pred), nrmse(y_true, y_pred), num_samples, per)


def evaluate_forecast(y_true, result: ForecastResult) -> MetricReport:
    """ND and normalized RMSE of the sample median against ``y_true`` [S x p x M]."""
    return evaluate_point(y_true, result.median, result.ids, result.samples.shape[1])


@dataclass
class AblationReport:
    """Error increase in percent of ND over the unablated forecast, per mode and level."""

    levels: list
    increase: dict
    nd: dict
    base_nd: dict

    def __post_init__(self):
        self.levels = [float(v) for v in self.levels]
        if self.levels != sorted(self.levels):
            raise ConfigError("ablation levels must be sorted ascending")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", "level", "nd", "increase_pct"])
            for mode in sorted(self.increase):
                for lvl, nd_v, inc in zip(self.levels, self.nd[mode], self.increase[mode]):
                    w.writerow([mode, repr(lvl), repr(nd_v), repr(inc)])


def _check_levels(levels) -> list:
    levels = sorted(float(v) for v in levels)
    for v in levels:
        if not 0 <= v < 1:
            raise DomainError(f"ablation levels must lie in [0, 1), got {v}")
    return levels


def _lowest_mask(key: np.ndarray, fraction: float) -> np.ndarray:
    """Flag the ``fraction`` smallest entries of each series' [p x Q] key."""
    s = key.shape[0]
    flat = key.reshape(s, -1)
    k = int(round(fraction * flat.shape[1]))
    mask = np.zeros_like(flat, dtype=bool)
    if k:
        order = np.argsort(flat, axis=1, kind="stable")[:, :k]
        np.put_along_axis(mask, order, True, axis=1)
    return mask.reshape(key.shape)


def _random_masks(shape, levels, seed) -> list:
    """Nested random masks: each level flags a superset of the previous level's coordinates."""
    s = shape[0]
    size = int(np.prod(shape[1:]))
    rng = np.random.default_rng([seed, 0x5EED])
    ranks = np.argsort(rng.random((s, size)), axis=1)
    out = []
    for lvl in levels:
        k = int(round(lvl * size))
        mask = np.zeros((s, size), dtype=bool)
        np.put_along_axis(mask, ranks[:, :k], True, axis=1)
        out.append(mask.reshape(shape))
    return out


def _split(test_set: SeriesBatch, history_len: int, horizon: int):
    if history_len + horizon > test_set.length:
        raise ShapeError(f"series of length {test_set.length} cannot cover {history_len} + {horizon} steps")
    hist = test_set.slice_time(0, history_len)
    hist.lengths = np.minimum(test_set.lengths, history_len)
    return hist, test_set.u[:, history_len:history_len + horizon], test_set.y[:, history_len:history_len + horizon]


def _increase(nd_level: float, nd_base: float) -> float:
    return 100.0 * (nd_level - nd_base) / nd_base


def ablate_shrinkage(cfg: ModelConfig, params: ParameterStore, test_set: SeriesBatch, history_len: int,
                     fcfg: ForecastConfig, modes: Sequence[str] = SHRINKAGE_MODES,
                     levels: Sequence[float] = DEFAULT_LEVELS) -> AblationReport:
    """ND increase when shrinkage scales are ignored at random or the lowest-scale latents are zeroed.

    ``random_remove`` replaces tau* lambda by 1 on a random share of the
    horizon's (t, i) coordinates. ``threshold_lowest`` ranks coordinates by
    the median over paths of tau* lambda in the unablated forecast and sets
    the lowest share of latents to 0. Every run reuses ``fcfg.seed``.
    """
    levels = _check_levels(levels)
    for m in modes:
        if m not in SHRINKAGE_MODES:
            raise ConfigError(f"unknown ablation mode {m!r}; expected one of {SHRINKAGE_MODES}")
    hist, u_fut, y_fut = _split(test_set, history_len, fcfg.horizon)
    base = forecast(cfg, params, hist, u_fut, fcfg)
    base_nd = nd(y_fut, base.median)
    shape = base.latents.shape[:1] + base.latents.shape[2:]
    out_nd, out_inc = {}, {}
    for mode in modes:
        if mode == "random_remove":
            masks = [ForecastAblation(ignore_scale=m) for m in _random_masks(shape, levels, fcfg.seed)]
        else:
            key = np.median(base.shrink_scale, axis=1)
            masks = [ForecastAblation(zero_latent=_lowest_mask(key, lvl)) for lvl in levels]
        nds = [base_nd if lvl == 0 else nd(y_fut, forecast(cfg, params, hist, u_fut, fcfg, m).median)
               for lvl, m in zip(levels, masks)]
        out_nd[mode] = nds
        out_inc[mode] = [_increase(v, base_nd) for v in nds]
    return AblationReport(levels, out_inc, out_nd, {m: base_nd for m in modes})


def _magnitude_curve(cfg, params, hist, u_fut, y_fut, fcfg, levels):
    base = forecast(cfg, params, hist, u_fut, fcfg)
    base_nd = nd(y_fut, base.median)
    key = np.median(np.abs(base.latents), axis=1)
    nds = [base_nd if lvl == 0 else
           nd(y_fut, forecast(cfg, params, hist, u_fut, fcfg, ForecastAblation(zero_latent=_lowest_mask(key, lvl))).median)
           for lvl in levels]
    return base_nd, nds


def ablate_decoder(linear: tuple, nonlinear: tuple, test_set: SeriesBatch, history_len: int,
                   fcfg: ForecastConfig, levels: Sequence[float] = DEFAULT_LEVELS) -> AblationReport:
    """ND increase when the smallest-|z| latents are zeroed, for a linear and an MLP decoder.

    ``linear`` and ``nonlinear`` are (ModelConfig, ParameterStore) pairs whose
    configurations may differ only in the decoder.
    """
    levels = _check_levels(levels)
    (lin_cfg, lin_params), (nl_cfg, nl_params) = linear, nonlinear
    if lin_cfg.decoder != "linear" or nl_cfg.decoder != "mlp":
        raise ConfigError("expected a linear-decoder model and an mlp-decoder model")
    a, b = lin_cfg.to_dict(), nl_cfg.to_dict()
    a.pop("decoder"), b.pop("decoder")
    if a != b:
        diff = sorted(k for k in a if a[k] != b.get(k))
        raise ConfigError(f"decoder ablation models differ beyond the decoder: {diff}")
    hist, u_fut, y_fut = _split(test_set, history_len, fcfg.horizon)
    out_nd, out_inc, base = {}, {}, {}
    for name, (c, p) in (("linear", linear), ("nonlinear", nonlinear)):
        base[name], out_nd[name] = _magnitude_curve(c, p, hist, u_fut, y_fut, fcfg, levels)
        out_inc[name] = [_increase(v, base[name]) for v in out_nd[name]]
    return AblationReport(levels, out_inc, out_nd, base)


def write_band_csv(result: ForecastResult, y_true, path, lower: float | None = None,
                   upper: float | None = None) -> None:
    """Plot data per step: series_id, t, dim, lower, median, upper, truth."""
    qs = sorted(result.bands)
    lower = qs[0] if lower is None else lower
    upper = qs[-1] if upper is None else upper
    for q in (lower, upper):
        if q not in result.bands:
            raise ConfigError(f"quantile {q} not in forecast bands {qs}")
    y_true = np.asarray(y_true, dtype=np.float64)
    med = result.median
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "t", "dim", "lower", "median", "upper", "truth"])
        for s, sid in enumerate(result.ids):
            start = int(result.start[s]) if result.start is not None else 0
            for k in range(result.horizon):
                for d in range(med.shape[2]):
                    w.writerow([sid, start + k, d, repr(float(result.bands[lower][s, k, d])),
                                repr(float(med[s, k, d])), repr(float(result.bands[upper][s, k, d])),
                                repr(float(y_true[s, k, d]))])
