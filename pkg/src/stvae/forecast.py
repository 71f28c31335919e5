"""Pointwise OLS and two-stage latent-trajectory forecasting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import Series
from .vae import VaeModel, decode, decode_values, encode_values


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    residual_se: float
    n: int

    def predict(self, t):
        return self.intercept + self.slope * np.asarray(t, dtype=np.float64)


def _ols_columns(times: np.ndarray, values: np.ndarray):
    """Closed-form OLS of every column of ``values`` (n, p) on ``times``.

    Returns (slopes, intercepts, residuals).
    """
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.ndim != 1 or y.shape[0] != t.shape[0]:
        raise ValueError(f"times {t.shape} and values {y.shape} do not line up")
    if t.shape[0] < 2:
        raise ValueError("OLS needs at least 2 points")
    tc = t - t.mean()
    sxx = float(tc @ tc)
    if sxx == 0.0:
        raise ValueError("all times are equal; slope is undefined")
    ybar = y.mean(axis=0)
    slope = (tc @ (y - ybar)) / sxx
    intercept = ybar - slope * t.mean()
    resid = y - (intercept + np.multiply.outer(t, slope))
    return slope, intercept, resid


def _se(resid: np.ndarray) -> np.ndarray:
    n = resid.shape[0]
    if n == 2:
        return np.zeros(resid.shape[1:])
    return np.sqrt(np.sum(resid * resid, axis=0) / (n - 2))


def ols_fit(times, values) -> LinearFit:
    y = np.asarray(values, dtype=np.float64)
    slope, intercept, resid = _ols_columns(times, y[:, None])
    return LinearFit(float(slope[0]), float(intercept[0]), float(_se(resid)[0]), y.shape[0])


@dataclass
class PwResult:
    predictions: np.ndarray  # (H, m) decibels
    slopes: np.ndarray
    intercepts: np.ndarray
    residual_se: np.ndarray  # (m,)
    residuals: np.ndarray  # (T, m)


def pw_fit_predict(series: Series, horizons) -> PwResult:
    """Independent least-squares line per location, extrapolated to ``horizons`` (times)."""
    if series.n_visits < 2:
        raise ValueError(f"series {series.series_id}: pointwise regression needs >= 2 visits")
    slope, intercept, resid = _ols_columns(series.times, series.values)
    h = np.atleast_1d(np.asarray(horizons, dtype=np.float64))
    pred = intercept[None, :] + np.multiply.outer(h, slope)
    return PwResult(pred, slope, intercept, _se(resid), resid)


@dataclass
class LatentFit:
    codes: np.ndarray  # (T, K) encoded visits
    slopes: np.ndarray  # (K,)
    intercepts: np.ndarray
    residual_se: np.ndarray
    times: np.ndarray

    def fits(self) -> list[LinearFit]:
        n = self.codes.shape[0]
        return [LinearFit(float(s), float(i), float(e), n) for s, i, e in zip(self.slopes, self.intercepts, self.residual_se)]

    def codes_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return self.intercepts[None, :] + np.multiply.outer(t, self.slopes)


def fit_codes(times, codes) -> LatentFit:
    """Independent OLS per latent dimension; column k never sees column j."""
    codes = np.asarray(codes, dtype=np.float64)
    slope, intercept, resid = _ols_columns(times, codes)
    return LatentFit(codes, slope, intercept, _se(resid), np.asarray(times, dtype=np.float64))


def latent_trajectory_fit(model: VaeModel, series: Series) -> LatentFit:
    if series.n_visits < 2:
        raise ValueError(f"series {series.series_id}: two-stage fit needs >= 2 visits")
    return fit_codes(series.times, encode_values(model, series.values))


def two_stage_predict(model: VaeModel, series: Series, horizons, fit: LatentFit | None = None) -> np.ndarray:
    """De-noised forecasts (H, m) in decibels: decode the extrapolated latent line."""
    fit = fit or latent_trajectory_fit(model, series)
    return decode_values(model, fit.codes_at(horizons))


def two_stage_predict_grids(model: VaeModel, series: Series, horizons) -> np.ndarray:
    """As two_stage_predict but returns normalised (H, 12, 12) decoder outputs."""
    fit = latent_trajectory_fit(model, series)
    return decode(model, fit.codes_at(horizons))


def two_stage_residuals(model: VaeModel, series: Series, fit: LatentFit | None = None) -> np.ndarray:
    """Observed minus decoded fitted-trajectory values, (T, m) decibels."""
    fit = fit or latent_trajectory_fit(model, series)
    return series.values - decode_values(model, fit.codes_at(series.times))


def pw_dof(n_locations: int) -> int:
    return 2 * n_locations


def two_stage_dof(latent_dim: int) -> int:
    return 2 * latent_dim

