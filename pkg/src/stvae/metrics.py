"""Prediction error, residual standard error and empirical correlations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import MaskError


@dataclass
class Field:
    """A 12x12 grid in decibels together with its informative mask."""

    grid: np.ndarray
    mask: np.ndarray

    def values(self) -> np.ndarray:
        return np.asarray(self.grid)[self.mask]


def mae(predicted, truth) -> float:
    """Mean absolute error over informative locations only.

    Accepts two Field objects (the padded cells are ignored) or two arrays of
    informative values.
    """
    if isinstance(predicted, Field) or isinstance(truth, Field):
        if not (isinstance(predicted, Field) and isinstance(truth, Field)):
            raise TypeError("mae needs two Fields or two value arrays")
        if not np.array_equal(predicted.mask, truth.mask):
            raise MaskError("predicted and true fields use different masks")
        a, b = predicted.values(), truth.values()
    else:
        a, b = np.asarray(predicted, dtype=np.float64), np.asarray(truth, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def residual_standard_error(residuals, dof: int = 0) -> float:
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size <= dof:
        raise ValueError(f"{r.size} residuals cannot support {dof} degrees of freedom")
    return math.sqrt(float(r @ r) / (r.size - dof))


def _corr_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise Pearson correlation with NaN where a row has zero variance."""
    c = a - a.mean(axis=1, keepdims=True)
    ss = np.sum(c * c, axis=1)
    ok = ss > 0
    out = np.full((a.shape[0], a.shape[0]), np.nan)
    cn = c[ok] / np.sqrt(ss[ok])[:, None]
    sub = np.clip(cn @ cn.T, -1.0, 1.0)
    idx = np.flatnonzero(ok)
    out[np.ix_(idx, idx)] = sub
    out[idx, idx] = 1.0
    return out


def empirical_correlations(values) -> tuple[np.ndarray, np.ndarray]:
    """(spatial m x m over visits, temporal T x T over locations) for a (T, m) series.

    Undefined entries (a constant row) are NaN rather than fabricated.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"series values must be (T, m), got {v.shape}")
    spatial = _corr_rows(v.T) if v.shape[0] >= 2 else np.full((v.shape[1],) * 2, np.nan)
    temporal = _corr_rows(v) if v.shape[1] >= 2 else np.full((v.shape[0],) * 2, np.nan)
    return spatial, temporal


def mean_abs_offdiagonal(corr: np.ndarray) -> float:
    c = np.asarray(corr)
    off = ~np.eye(c.shape[0], dtype=bool)
    vals = np.abs(c[off])
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if vals.size else float("nan")
