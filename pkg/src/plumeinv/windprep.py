"""Gaussian-process regularization of raw wind records onto a time grid.

Raw anemometer records (speed + meteorological "blowing from" direction)
are converted to Cartesian components and each component is smoothed
independently by zero-mean GP regression with a squared-exponential
kernel. Hyperparameters come from k-fold cross-validation over a small
logarithmic candidate grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .observation import TimeGrid

__all__ = [
    "RawWindRecord",
    "WindSeries",
    "GPConfig",
    "to_components",
    "gp_posterior_mean",
    "default_candidates",
    "cross_validate",
    "select_hyperparameters",
    "fit_wind",
    "regularize_wind",
]

logger = logging.getLogger(__name__)

CV_MAX_POINTS_DEFAULT = 400  # cross-validation subsample cap (cost control)


@dataclass(frozen=True)
class RawWindRecord:
    """One anemometer reading: speed and direction the wind blows from."""

    timestamp: float  # epoch s
    speed: float  # m s^-1
    direction_from: float  # degrees clockwise from north

    def __post_init__(self) -> None:
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        if not (math.isfinite(self.speed) and self.speed >= 0):
            raise ValueError(f"speed must be finite and nonnegative, got {self.speed}")
        if not (0.0 <= self.direction_from < 360.0):
            raise ValueError(f"direction must be in [0, 360), got {self.direction_from}")


@dataclass(frozen=True, eq=False)
class WindSeries:
    """Regularized wind components evaluated at the grid times."""

    grid: TimeGrid
    u_x: np.ndarray
    u_y: np.ndarray

    def __post_init__(self) -> None:
        ux = np.asarray(self.u_x, dtype=float)
        uy = np.asarray(self.u_y, dtype=float)
        if ux.shape != (self.grid.n_steps,) or uy.shape != (self.grid.n_steps,):
            raise ValueError("component lengths must equal the grid step count")
        if not (np.all(np.isfinite(ux)) and np.all(np.isfinite(uy))):
            raise ValueError("wind components must be finite")
        object.__setattr__(self, "u_x", ux)
        object.__setattr__(self, "u_y", uy)

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.u_x, self.u_y)


@dataclass(frozen=True)
class GPConfig:
    """Squared-exponential kernel hyperparameters."""

    signal_var: float  # s^2 in k(t,t') = s^2 exp(-(t-t')^2 / (2 l^2))
    length_scale: float  # l, seconds
    noise_var: float  # diagonal noise variance

    def __post_init__(self) -> None:
        if not (self.signal_var > 0 and self.length_scale > 0 and self.noise_var > 0):
            raise ValueError("GP hyperparameters must be positive")


def to_components(record: RawWindRecord):
    """Cartesian (u_x, u_y) with y north: a wind *from* theta blows along
    (-sin theta, -cos theta)."""
    theta = math.radians(record.direction_from)
    return (-record.speed * math.sin(theta), -record.speed * math.cos(theta))


def _se_kernel(t_a: np.ndarray, t_b: np.ndarray, cfg: GPConfig) -> np.ndarray:
    d = t_a[:, None] - t_b[None, :]
    return cfg.signal_var * np.exp(-(d**2) / (2.0 * cfg.length_scale**2))


def gp_posterior_mean(
    times: np.ndarray,
    values: np.ndarray,
    cfg: GPConfig,
    query_times: np.ndarray,
) -> np.ndarray:
    """Zero-mean GP regression mean at the query times.

    Args:
        times: (n,) training epochs.
        values: (n,) training values.
        cfg: kernel hyperparameters.
        query_times: (m,) evaluation epochs.

    Returns:
        (m,) posterior mean. An ill-conditioned kernel matrix gets a
        jitter of 1e-10 * signal_var added once, logged.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    query_times = np.asarray(query_times, dtype=float)
    if times.size < 2:
        raise ValueError("need at least two training points")
    gram = _se_kernel(times, times, cfg)
    gram[np.diag_indices_from(gram)] += cfg.noise_var
    try:
        factor = cho_factor(gram, lower=True)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * cfg.signal_var
        logger.warning("kernel matrix not positive definite; adding jitter %.3g", jitter)
        gram[np.diag_indices_from(gram)] += jitter
        factor = cho_factor(gram, lower=True)
    alpha = cho_solve(factor, values)
    return _se_kernel(query_times, times, cfg) @ alpha


def default_candidates(times: np.ndarray, values: np.ndarray) -> list:
    """3 x 5 x 3 logarithmic hyperparameter grid scaled from the data."""
    times = np.asarray(times, dtype=float)
    span = float(times.max() - times.min())
    var = float(np.var(values))
    if var <= 0:
        var = 1.0
    candidates = []
    for sv in (0.5 * var, var, 2.0 * var):
        for ls in (3e-4 * span, 1e-3 * span, 3e-3 * span, 1e-2 * span, 3e-2 * span):
            for nv in (0.01 * var, 0.1 * var, 0.5 * var):
                candidates.append(GPConfig(sv, ls, nv))
    return candidates


def cross_validate(
    times: np.ndarray,
    values: np.ndarray,
    candidates: Sequence[GPConfig],
    seed: int = 0,
    n_folds: int = 10,
) -> GPConfig:
    """Pick the candidate with the lowest mean held-out squared error.

    Folds are contiguous chunks of a seeded shuffle of the indices. With
    fewer than ``n_folds`` points the split degrades to leave-one-out
    (logged). Ties break to the smallest length scale, then first listed.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if not candidates:
        raise ValueError("need at least one candidate configuration")
    n = times.size
    if n < n_folds:
        logger.info("only %d points; falling back to leave-one-out", n)
        n_folds = n
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, n_folds)

    scores = np.empty(len(candidates))
    for ci, cfg in enumerate(candidates):
        errs = []
        for fold in folds:
            train = np.setdiff1d(perm, fold, assume_unique=True)
            if train.size < 2:
                continue
            pred = gp_posterior_mean(times[train], values[train], cfg, times[fold])
            errs.append(float(np.mean((pred - values[fold]) ** 2)))
        scores[ci] = float(np.mean(errs)) if errs else np.inf
    best = min(
        range(len(candidates)),
        key=lambda ci: (scores[ci], candidates[ci].length_scale, ci),
    )
    logger.debug("cross-validation scores: %s; chose %s", scores, candidates[best])
    return candidates[best]


def _dedupe_sorted(records: Sequence[RawWindRecord]) -> list:
    """Sort by timestamp; on duplicates the last occurrence wins."""
    indexed = sorted(enumerate(records), key=lambda ir: (ir[1].timestamp, ir[0]))
    out = []
    for _, rec in indexed:
        if out and out[-1].timestamp == rec.timestamp:
            out[-1] = rec
        else:
            out.append(rec)
    return out


def _cv_subsample(n: int, cap: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, cap)).astype(int))


def _component_arrays(records: Sequence[RawWindRecord]):
    recs = _dedupe_sorted(records)
    if len(recs) < 2:
        raise ValueError("need at least two wind records")
    t = np.array([r.timestamp for r in recs])
    comps = np.array([to_components(r) for r in recs])
    return t, comps


def select_hyperparameters(
    records: Sequence[RawWindRecord],
    candidates: Sequence[GPConfig] = None,
    seed: int = 0,
    cv_max_points: int = CV_MAX_POINTS_DEFAULT,
):
    """Cross-validated kernel choice for each wind component.

    Selection runs on an evenly-strided subsample of at most
    ``cv_max_points`` records (cost cap); returns (cfg_x, cfg_y).
    """
    t, comps = _component_arrays(records)
    sub = _cv_subsample(t.size, cv_max_points)
    chosen = []
    for k in range(2):
        cand = candidates if candidates is not None else default_candidates(t, comps[:, k])
        chosen.append(cross_validate(t[sub], comps[sub, k], cand, seed=seed))
    return chosen[0], chosen[1]


def fit_wind(
    records: Sequence[RawWindRecord],
    grid: TimeGrid,
    configs,
) -> WindSeries:
    """GP posterior mean of both components on all records at the grid times.

    Grid times outside the record span are still evaluated (GP
    extrapolation) with a warning.
    """
    t, comps = _component_arrays(records)
    query = grid.times
    if query[0] < t[0] or query[-1] > t[-1]:
        logger.warning(
            "grid [%s, %s] extends beyond the wind records [%s, %s]; extrapolating",
            query[0], query[-1], t[0], t[-1],
        )
    u_x = gp_posterior_mean(t, comps[:, 0], configs[0], query)
    u_y = gp_posterior_mean(t, comps[:, 1], configs[1], query)
    return WindSeries(grid=grid, u_x=u_x, u_y=u_y)


def regularize_wind(
    records: Sequence[RawWindRecord],
    grid: TimeGrid,
    candidates: Sequence[GPConfig] = None,
    seed: int = 0,
    cv_max_points: int = CV_MAX_POINTS_DEFAULT,
) -> WindSeries:
    """Smooth raw records onto the grid, one GP fit per component.

    Args:
        records: raw wind data in any order (sorted here; duplicate
            timestamps keep the last record).
        grid: target inversion/generation grid.
        candidates: hyperparameter grid; default scales from the data.
        seed: cross-validation shuffle seed.
        cv_max_points: cross-validation cost cap; hyperparameters are
            selected on a subsample, the final fit uses all records.

    Returns:
        WindSeries on ``grid``.
    """
    configs = select_hyperparameters(
        records, candidates=candidates, seed=seed, cv_max_points=cv_max_points
    )
    return fit_wind(records, grid, configs)
