"""Anomaly detection over one-step prediction residuals.

Healthy residual statistics (mean, ridge-regularized covariance) come from
validation windows; a sequence is scored by the maximum Mahalanobis distance
of its non-overlapping windows' residuals and flagged ANOMALY when that score
exceeds the calibrated threshold tau. Max aggregation is deliberate: faults
are short-lived and a mean would dilute them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import backend
from .errors import DataError
from .model import ModelParams, forward, forward_batch, input_gradient_from_output
from .preprocess import WindowSet, make_windows, normalize
from .telemetry import ANOMALY, NORMAL, TelemetrySeries

#: Relative weight of the default covariance ridge: lambda = RIDGE_REL * trace/d.
RIDGE_REL = 1e-3

_TAU_FLOOR = 1e-12  # keeps tau > 0 when calibration residuals are degenerate


@dataclass(frozen=True)
class DetectorCalibration:
    mu: np.ndarray         # (d,) residual mean
    sigma: np.ndarray      # (d, d) residual covariance
    sigma_inv: np.ndarray  # (d, d) inverse of sigma + ridge*I
    ridge: float
    tau: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        sigma = np.ascontiguousarray(self.sigma, dtype=np.float64)
        sigma_inv = np.ascontiguousarray(self.sigma_inv, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "sigma_inv", sigma_inv)
        d = mu.shape[0]
        if sigma.shape != (d, d) or sigma_inv.shape != (d, d):
            raise DataError("calibration matrices must be (d, d) matching mu")
        if np.abs(sigma - sigma.T).max() > 1e-9:
            raise DataError("sigma must be symmetric")
        if not self.tau > 0:
            raise DataError(f"tau must be > 0, got {self.tau}")
        if self.ridge < 0:
            raise DataError(f"ridge must be >= 0, got {self.ridge}")
        reg = sigma + self.ridge * np.eye(d)
        try:
            np.linalg.cholesky(reg)
        except np.linalg.LinAlgError:
            raise DataError("sigma + ridge*I is not positive definite") from None
        if np.abs(sigma_inv @ reg - np.eye(d)).max() > 1e-6:
            raise DataError("sigma_inv is not the inverse of sigma + ridge*I")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class Verdict:
    score: float
    per_window_distances: tuple[float, ...]
    label: str
    tau: float

    def __post_init__(self):
        expected = ANOMALY if self.score > self.tau else NORMAL
        if self.label != expected:
            raise DataError(
                f"verdict label {self.label} inconsistent with score {self.score} "
                f"vs tau {self.tau}")


def residuals(params: ModelParams, windows: WindowSet) -> np.ndarray:
    """One residual (target - prediction) per window, in window order."""
    X = windows.inputs_matrix()
    Y = windows.targets_matrix()
    return Y - forward_batch(params, X)


def default_ridge(sigma: np.ndarray) -> float:
    return RIDGE_REL * float(np.trace(sigma)) / sigma.shape[0]


def fit_calibration(residual_matrix, quantile: float = 0.99,
                    ridge: float | None = None) -> DetectorCalibration:
    """Estimate healthy-residual statistics and the decision threshold.

    mu/sigma are the sample mean and covariance (ddof=1); sigma + ridge*I is
    inverted through its Cholesky factor; tau is the `quantile` of the
    calibration residuals' own Mahalanobis distances (linear interpolation).
    ridge=None selects the default trace-scaled ridge; ridge=0 is allowed when
    the sample covariance is full rank.
    """
    R = np.atleast_2d(np.ascontiguousarray(residual_matrix, dtype=np.float64))
    n, d = R.shape
    if n < 2:
        raise DataError(f"need at least 2 residuals to calibrate, got {n}")
    if not 0 < quantile < 1:
        raise DataError(f"quantile must be in (0, 1), got {quantile}")
    mu = R.mean(axis=0)
    centered = R - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    lam = default_ridge(sigma) if ridge is None else float(ridge)
    if lam < 0:
        raise DataError(f"ridge must be >= 0, got {lam}")
    reg = sigma + lam * np.eye(d)
    try:
        cho = scipy.linalg.cho_factor(reg, lower=True)
    except np.linalg.LinAlgError as e:
        raise DataError(
            f"residual covariance is singular (n={n}, d={d}) and ridge={lam}; "
            "provide more residuals or a positive ridge") from e
    sigma_inv = scipy.linalg.cho_solve(cho, np.eye(d))
    sigma_inv = (sigma_inv + sigma_inv.T) / 2.0

    k = backend.get_backend()
    dist = np.sqrt(np.maximum(k.mahalanobis_sq(R, mu, sigma_inv), 0.0))
    tau = max(float(np.quantile(dist, quantile)), _TAU_FLOOR)
    meta = {"window_count": int(n), "quantile": float(quantile)}
    return DetectorCalibration(mu, sigma, sigma_inv, lam, tau, meta)


def mahalanobis(r, calib: DetectorCalibration) -> float:
    """sqrt((r - mu)^T sigma_inv (r - mu))."""
    r = np.asarray(r, dtype=np.float64).reshape(1, -1)
    if r.shape[1] != calib.dim:
        raise DataError(f"residual has {r.shape[1]} channels, calibration {calib.dim}")
    k = backend.get_backend()
    return float(np.sqrt(max(k.mahalanobis_sq(r, calib.mu, calib.sigma_inv)[0], 0.0)))


def window_distances(params: ModelParams, calib: DetectorCalibration,
                     windows: WindowSet) -> np.ndarray:
    R = residuals(params, windows)
    k = backend.get_backend()
    return np.sqrt(np.maximum(k.mahalanobis_sq(R, calib.mu, calib.sigma_inv), 0.0))


def score_sequence(params: ModelParams, calib: DetectorCalibration,
                   series: TelemetrySeries) -> Verdict:
    """Normalize, cut non-overlapping windows, score each, aggregate by max."""
    if params.norm_stats is None:
        raise DataError("model has no embedded normalization stats; cannot score")
    W = params.layout.window_length
    if len(series) < W + 1:
        raise DataError(
            f"series has {len(series)} rows; need at least {W + 1} to score")
    z = normalize(series, params.norm_stats)
    windows = make_windows(z, W, stride=W)
    dist = window_distances(params, calib, windows)
    score = float(dist.max())
    label = ANOMALY if score > calib.tau else NORMAL
    return Verdict(score, tuple(float(x) for x in dist), label, calib.tau)


def distance_residual_gradient(calib: DetectorCalibration, r) -> np.ndarray:
    """Gradient of the Mahalanobis distance w.r.t. the residual vector.

    Zero at the (non-differentiable) point r == mu; the detector reports
    distance 0 there, so no attack direction is preferable anyway.
    """
    delta = np.asarray(r, dtype=np.float64).reshape(-1) - calib.mu
    v = calib.sigma_inv @ delta
    q = float(delta @ v)
    if q <= 0.0:
        return np.zeros_like(delta)
    return v / np.sqrt(q)


def distance_gradient(params: ModelParams, calib: DetectorCalibration,
                      window, target) -> np.ndarray:
    """Exact gradient of a window's Mahalanobis distance w.r.t. its inputs.

    The distance is mahalanobis(target - f(window)); the returned array has
    the window's shape. Returns zeros at the singular point residual == mu.
    """
    pred = forward(params, window)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if t.shape[0] != params.layout.output_dim:
        raise DataError(
            f"target has {t.shape[0]} values, model outputs {params.layout.output_dim}")
    d_dr = distance_residual_gradient(calib, t - pred)
    if not d_dr.any():
        return np.zeros_like(np.asarray(window, dtype=np.float64))
    # residual = target - prediction, so d(distance)/d(prediction) = -d_dr
    return input_gradient_from_output(params, window, -d_dr)
