"""Input checks for panel arrays passed to the estimator API."""

from __future__ import annotations

import numpy as np

from .data import SeriesBatch
from .errors import NonFiniteError, ShapeError


def check_panel(y, name: str = "y") -> tuple[np.ndarray, bool]:
    """Coerce a response panel to float64 [S x T x M].

    A 2-D input [S x T] is treated as a single response dimension; the second
    return value records that so outputs can be squeezed back.
    """
    arr = np.asarray(y, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be 2-D [series x time] or 3-D [series x time x dim], got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"{name} is empty: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{name} has a non-finite value at index {tuple(int(i) for i in bad)}")
    return arr, squeeze


def check_covariates(X, n_series: int, length: int, name: str = "X") -> np.ndarray:
    """Coerce covariates to [S x T x N]; ``None`` becomes a zero-width array."""
    if X is None:
        return np.zeros((n_series, length, 0))
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] != n_series or arr.shape[1] != length:
        raise ShapeError(f"{name} must be [{n_series} x {length} x N], got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite values")
    return arr


def check_lengths(lengths, n_series: int, length: int) -> np.ndarray:
    if lengths is None:
        return np.full(n_series, length, dtype=np.int64)
    out = np.asarray(lengths)
    if out.shape != (n_series,) or not np.issubdtype(out.dtype, np.integer):
        raise ShapeError(f"lengths must be {n_series} integers, got {out.shape} {out.dtype}")
    if np.any(out < 1) or np.any(out > length):
        raise ShapeError(f"lengths must lie in [1, {length}]")
    return out.astype(np.int64)


def to_batch(X, y, lengths=None) -> tuple[SeriesBatch, bool]:
    """Validate (covariates, response) arrays and pack them into a :class:`SeriesBatch`."""
    y3, squeeze = check_panel(y)
    s, t = y3.shape[:2]
    u = check_covariates(X, s, t)
    n = check_lengths(lengths, s, t)
    mask = np.arange(t)[None, :] < n[:, None]
    y3 = np.where(mask[:, :, None], y3, 0.0)
    return SeriesBatch(y3, u, n, np.ones(s), [str(i) for i in range(s)]), squeeze
