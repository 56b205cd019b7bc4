"""Propagation of emission estimates onto ground deposition maps.

The forward-on-grid operator H maps the stacked emission vector to
time-integrated ground-level deposition (kg m^-2 over the period) at every
grid point, using the same left-endpoint quadrature as the observation
map. Posterior covariance is pushed through H via a truncated symmetric
eigendecomposition: per-cell variance needs only one forward application
per retained mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CalmWindError
from .observation import TimeGrid
from .plume import ParticleProperties, SourceSite, StabilityClass, kernel_profile

__all__ = [
    "GridSpec",
    "LowRankFactors",
    "DepositionGrid",
    "assemble_H",
    "lowrank_truncate",
    "deposition_stats",
    "annualize",
]

logger = logging.getLogger(__name__)

SECONDS_PER_YEAR = 31_536_000.0


@dataclass(frozen=True)
class GridSpec:
    """Rectangular ground patch sampled on an n_x by n_y point lattice."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    n_x: int
    n_y: int

    def __post_init__(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds must have positive extent")
        if self.n_x < 2 or self.n_y < 2:
            raise ValueError("need at least 2 points per axis")

    @property
    def n_cells(self) -> int:
        return self.n_x * self.n_y

    def points(self) -> np.ndarray:
        """(n_cells, 2) ground coordinates, row-major by y then x."""
        xs = np.linspace(self.x_min, self.x_max, self.n_x)
        ys = np.linspace(self.y_min, self.y_max, self.n_y)
        gx, gy = np.meshgrid(xs, ys)  # gx[iy, ix]
        return np.column_stack([gx.ravel(), gy.ravel()])


def assemble_H(
    grid: GridSpec,
    sites: Sequence[SourceSite],
    wind,
    timegrid: TimeGrid,
    particle: ParticleProperties,
    sc: StabilityClass,
    x_cutoff: float = None,
    calm_speed: float = None,
) -> np.ndarray:
    """Deposition operator, shape (n_cells, n_sources * n_steps).

    Row p holds w_dep * dt * kernel(cell p, source i, step j) in
    source-major column order; H q is then the per-cell deposition
    accumulated over the period at ground level (z = 0).
    """
    kwargs = {}
    if x_cutoff is not None:
        kwargs["x_cutoff"] = x_cutoff
    if calm_speed is not None:
        kwargs["calm_speed"] = calm_speed
    pts = grid.points()
    points3 = np.column_stack([pts, np.zeros(len(pts))])
    n_t, n_s = timegrid.n_steps, len(sites)
    u_x, u_y = np.asarray(wind.u_x, dtype=float), np.asarray(wind.u_y, dtype=float)
    if len(u_x) != n_t:
        raise ValueError("wind series length does not match the time grid")
    out = np.zeros((grid.n_cells, n_s * n_t))
    weight = particle.w_dep * timegrid.dt
    cols = np.arange(n_s) * n_t
    calm = 0
    for j in range(n_t):
        try:
            kernels = kernel_profile(points3, sites, (u_x[j], u_y[j]), particle, sc, **kwargs)
        except CalmWindError:
            calm += 1
            continue
        out[:, cols + j] = weight * kernels
    if calm:
        logger.warning("calm wind at %d of %d steps; those steps deposit nothing", calm, n_t)
    return out


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """Leading eigenpairs of a covariance, eigenvalues nonincreasing."""

    eigenvalues: np.ndarray  # (n_e,)
    vectors: np.ndarray  # (n, n_e), orthonormal columns

    def __post_init__(self) -> None:
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be nonincreasing")
        if np.any(self.eigenvalues < 0):
            raise ValueError("eigenvalues must be nonnegative (clamp before constructing)")

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)


def lowrank_truncate(cov: np.ndarray, n_modes: int, sym_tol: float = 1e-8) -> LowRankFactors:
    """Leading ``n_modes`` eigenpairs of a symmetric covariance.

    Negative trailing eigenvalues (roundoff) are clamped to zero with a
    log message; asymmetry beyond ``sym_tol`` (relative to the largest
    entry) is an error.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise ValueError("covariance must be square")
    if not 1 <= n_modes <= n:
        raise ValueError(f"n_modes must be in [1, {n}], got {n_modes}")
    scale = max(1.0, float(np.abs(cov).max()))
    asym = float(np.abs(cov - cov.T).max())
    if asym > sym_tol * scale:
        raise ValueError(f"covariance asymmetric beyond tolerance ({asym:.3e})")
    eigvals, eigvecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(eigvals)[::-1][:n_modes]
    lam = eigvals[order]
    negative = lam < 0
    if negative.any():
        logger.info(
            "clamping %d negative eigenvalues (most negative %.3e) to zero",
            int(negative.sum()), float(lam.min()),
        )
        lam = np.maximum(lam, 0.0)
    return LowRankFactors(eigenvalues=lam, vectors=eigvecs[:, order])


@dataclass(frozen=True, eq=False)
class DepositionGrid:
    """Per-cell deposition mean and standard deviation, SI units (kg m^-2)."""

    mean: np.ndarray
    std: np.ndarray
    grid: GridSpec

    def __post_init__(self) -> None:
        if self.mean.shape != (self.grid.n_cells,) or self.std.shape != (self.grid.n_cells,):
            raise ValueError("field lengths must match the grid")
        if np.any(self.std < 0):
            raise ValueError("std must be nonnegative")


def deposition_stats(
    h_matrix: np.ndarray,
    q: np.ndarray,
    factors: LowRankFactors,
    grid: GridSpec,
) -> DepositionGrid:
    """Deposition mean H q and per-cell std from low-rank covariance factors.

    std_p = sqrt( sum_e lambda_e (H l_e)_p^2 ), one forward application of
    H per retained mode.
    """
    mean = h_matrix @ np.asarray(q, dtype=float)
    propagated = h_matrix @ factors.vectors  # (n_cells, n_e)
    var = (propagated**2) @ factors.eigenvalues
    return DepositionGrid(mean=mean, std=np.sqrt(np.maximum(var, 0.0)), grid=grid)


def annualize(q: np.ndarray, timegrid: TimeGrid) -> float:
    """Extrapolated annual total, tonne per year.

    The time-and-source mean rate (kg s^-1) summed over sources, scaled to
    a calendar year and converted to tonnes.
    """
    q = np.asarray(q, dtype=float)
    if q.size % timegrid.n_steps:
        raise ValueError("vector length is not a multiple of the grid step count")
    n_sources = q.size // timegrid.n_steps
    per_source = q.reshape(n_sources, timegrid.n_steps).mean(axis=1)
    return float(per_source.sum() * SECONDS_PER_YEAR / 1000.0)
