"""Linear observation map from stacked emission rates to sensor readings.

Builds F = M G where G evaluates unit-emission plume kernels at sensor
locations on a uniform time grid and M applies each sensor's time-window
weighting by a left-endpoint rectangle rule.

Conventions:
    * Grid times are t_j = t0 + j*dt for j = 1..n_steps, i.e. the right
      endpoints of the n_steps slots partitioning (t0, t0 + span].
    * The stacked emission vector q is source-major: all time slots of
      source 1, then source 2, and so on. Entry i*n_steps + (j-1) is
      source i's rate in slot j.
    * Measurements stack sensors in declaration order, and within a sensor
      in time order. Dust-fall jars accumulate mass (kg) over the whole
      period; real-time samplers average concentration (kg m^-3) over
      their windows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import CalmWindError, ConfigurationError
from .plume import ParticleProperties, SourceSite, StabilityClass, kernel_profile

__all__ = [
    "TimeGrid",
    "DustfallJar",
    "RealTimeSampler",
    "Sensor",
    "MeasurementSet",
    "measurement_count",
    "measurement_layout",
    "window_weight",
    "assemble_M",
    "assemble_G",
    "assemble_F",
    "signal_variances",
    "simulate_measurements",
]

logger = logging.getLogger(__name__)

NOISE_FLOOR_DEFAULT = 1e-12  # std floor in measurement units for flat signals


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid: n_steps slots of width dt starting at epoch t0."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be at least 2, got {self.n_steps}")

    @property
    def span(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        """Slot times t0 + dt, t0 + 2 dt, ..., t0 + n_steps dt."""
        return self.t0 + self.dt * np.arange(1, self.n_steps + 1)


@dataclass(frozen=True)
class DustfallJar:
    """Passive collector: one accumulated deposition value per period."""

    id: str
    x: float
    y: float
    z: float
    area: float  # collection cross-section, m^2
    snr: float

    def __post_init__(self) -> None:
        if not self.area > 0:
            raise ValueError(f"jar area must be positive, got {self.area}")
        if not self.snr > 0:
            raise ValueError(f"snr must be positive, got {self.snr}")

    @property
    def location(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclass(frozen=True)
class RealTimeSampler:
    """Active sampler: mean concentration over each scheduled window."""

    id: str
    x: float
    y: float
    z: float
    window: float  # window length, s
    start_times: tuple  # window start epochs, strictly increasing
    snr: float

    def __post_init__(self) -> None:
        if not self.window > 0:
            raise ValueError(f"sampler window must be positive, got {self.window}")
        if not self.snr > 0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        starts = tuple(float(t) for t in self.start_times)
        if len(starts) == 0:
            raise ValueError("sampler needs at least one start time")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("sampler start times must be strictly increasing")
        object.__setattr__(self, "start_times", starts)

    @property
    def location(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


Sensor = Union[DustfallJar, RealTimeSampler]


def measurement_count(sensor: Sensor) -> int:
    """Number of values this sensor reports over the period."""
    if isinstance(sensor, DustfallJar):
        return 1
    return len(sensor.start_times)


def measurement_layout(sensors: Sequence[Sensor]) -> list:
    """Stacking order of the measurement vector: (sensor id, index) pairs."""
    layout = []
    for sensor in sensors:
        for ell in range(measurement_count(sensor)):
            layout.append((sensor.id, ell))
    return layout


def window_weight(sensor: Sensor, ell: int, t: float, grid: TimeGrid, w_dep: float) -> float:
    """Time-window weight of measurement ``ell`` at time ``t``.

    Jars weight by area*w_dep inside the whole period (t0, t0+span];
    samplers weight by 1/window inside (start_ell, start_ell + window].
    """
    if ell < 0 or ell >= measurement_count(sensor):
        raise IndexError(f"measurement index {ell} out of range for sensor {sensor.id!r}")
    if isinstance(sensor, DustfallJar):
        inside = grid.t0 < t <= grid.t0 + grid.span
        return sensor.area * w_dep if inside else 0.0
    start = sensor.start_times[ell]
    inside = start < t <= start + sensor.window
    return 1.0 / sensor.window if inside else 0.0


def assemble_M(sensor: Sensor, grid: TimeGrid, w_dep: float) -> np.ndarray:
    """Quadrature matrix of one sensor: entry (ell, j) = weight(t_j) * dt.

    Raises:
        ConfigurationError: a sampler window lies outside the grid span or
            captures no grid point.
    """
    times = grid.times
    if isinstance(sensor, DustfallJar):
        weights = np.array([window_weight(sensor, 0, t, grid, w_dep) for t in times])
        return weights[None, :] * grid.dt
    starts = np.asarray(sensor.start_times, dtype=float)
    tol = 1e-6  # s of float slack on window containment
    if starts.min() < grid.t0 - tol or starts.max() + sensor.window > grid.t0 + grid.span + tol:
        raise ConfigurationError(
            f"sensor {sensor.id!r}: sampling windows extend outside the time grid"
        )
    covered = (times[None, :] > starts[:, None]) & (times[None, :] <= starts[:, None] + sensor.window)
    has_point = covered.any(axis=1)
    if not has_point.all():
        empty = int(np.flatnonzero(~has_point)[0])
        raise ConfigurationError(
            f"sensor {sensor.id!r}: window {empty} captures no grid point "
            f"(window {sensor.window} s vs grid dt {grid.dt} s)"
        )
    return covered.astype(float) * (grid.dt / sensor.window)


def assemble_G(
    sensors: Sequence[Sensor],
    sites: Sequence[SourceSite],
    wind,
    grid: TimeGrid,
    particle: ParticleProperties,
    sc: StabilityClass,
    x_cutoff: float = None,
    calm_speed: float = None,
) -> list:
    """Unit-emission kernel tables, one (n_steps, n_sources) array per sensor.

    ``wind`` is anything with u_x / u_y arrays of length ``grid.n_steps``
    (a WindSeries, or a plain namespace in tests). Calm steps contribute
    zero rows and are logged once.
    """
    kwargs = {}
    if x_cutoff is not None:
        kwargs["x_cutoff"] = x_cutoff
    if calm_speed is not None:
        kwargs["calm_speed"] = calm_speed
    points = np.array([s.location for s in sensors], dtype=float).reshape(len(sensors), 3)
    n_t, n_p, n_s = grid.n_steps, len(sensors), len(sites)
    table = np.zeros((n_t, n_p, n_s))
    u_x, u_y = np.asarray(wind.u_x, dtype=float), np.asarray(wind.u_y, dtype=float)
    if len(u_x) != n_t or len(u_y) != n_t:
        raise ValueError("wind series length does not match the time grid")
    calm = 0
    for j in range(n_t):
        try:
            table[j] = kernel_profile(points, sites, (u_x[j], u_y[j]), particle, sc, **kwargs)
        except CalmWindError:
            calm += 1
    if calm:
        logger.warning("calm wind at %d of %d steps; those steps contribute zero", calm, n_t)
    return [table[:, k, :] for k in range(n_p)]


def assemble_F(
    sensors: Sequence[Sensor],
    sites: Sequence[SourceSite],
    wind,
    grid: TimeGrid,
    particle: ParticleProperties,
    sc: StabilityClass,
    x_cutoff: float = None,
    calm_speed: float = None,
) -> np.ndarray:
    """Observation map F = M G, shape (total measurements, n_sources*n_steps)."""
    g_tables = assemble_G(sensors, sites, wind, grid, particle, sc, x_cutoff, calm_speed)
    n_t, n_s = grid.n_steps, len(sites)
    blocks = []
    for sensor, g_k in zip(sensors, g_tables):
        m_k = assemble_M(sensor, grid, particle.w_dep)
        # F_k[l, i*n_t + j] = M_k[l, j] * G_k[j, i]
        f_k = np.einsum("lj,ji->lij", m_k, g_k).reshape(m_k.shape[0], n_s * n_t)
        blocks.append(f_k)
    f = np.vstack(blocks) if blocks else np.zeros((0, n_s * n_t))
    assert f.shape == (sum(measurement_count(s) for s in sensors), n_s * n_t)
    if not np.all(np.isfinite(f)):
        raise AssertionError("observation map contains non-finite entries")
    return f


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Stacked sensor readings with per-entry diagonal noise variance."""

    sensor_ids: tuple  # per entry
    indices: np.ndarray  # per-sensor measurement index, 0-based
    values: np.ndarray  # stacked vector d
    noise_var: np.ndarray  # diagonal of Sigma
    units: tuple  # per entry, "kg" (jars) or "kg_m3" (samplers)

    def __post_init__(self) -> None:
        n = len(self.values)
        if not (len(self.sensor_ids) == len(self.indices) == len(self.noise_var) == len(self.units) == n):
            raise ValueError("measurement fields must have equal length")
        if not np.all(self.noise_var > 0):
            raise ValueError("noise variances must be positive")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def entries(self) -> list:
        return list(zip(self.sensor_ids, self.indices.tolist(), self.values.tolist(), self.units))


def _sensor_slices(sensors: Sequence[Sensor]) -> list:
    slices = []
    offset = 0
    for sensor in sensors:
        m = measurement_count(sensor)
        slices.append((sensor, slice(offset, offset + m)))
        offset += m
    return slices


def _unit_of(sensor: Sensor) -> str:
    return "kg" if isinstance(sensor, DustfallJar) else "kg_m3"


def signal_variances(
    values: np.ndarray,
    sensors: Sequence[Sensor],
    noise_floor: float = NOISE_FLOOR_DEFAULT,
) -> np.ndarray:
    """Per-entry noise variance from per-sensor SNR (population variance).

    A multi-reading sampler uses the variance of its own entries. A jar
    reports a single value per period, so its signal variance is pooled
    across the whole jar network (the variance of one number is not a
    signal scale). Flat signals fall back to the ``noise_floor`` std.
    """
    values = np.asarray(values, dtype=float)
    noise_var = np.empty_like(values)
    jar_rows = np.concatenate(
        [np.arange(rows.start, rows.stop) for s, rows in _sensor_slices(sensors)
         if isinstance(s, DustfallJar)]
    ) if any(isinstance(s, DustfallJar) for s in sensors) else np.array([], dtype=int)
    jar_var = float(np.var(values[jar_rows])) if jar_rows.size else 0.0
    for sensor, rows in _sensor_slices(sensors):
        if isinstance(sensor, DustfallJar):
            signal_var = jar_var
        else:
            signal_var = float(np.var(values[rows]))
        if signal_var > 0:
            noise_var[rows] = signal_var / sensor.snr
        else:
            logger.warning("sensor %s has a flat signal; using noise floor", sensor.id)
            noise_var[rows] = noise_floor**2
    return noise_var


def simulate_measurements(
    f_matrix: np.ndarray,
    q: np.ndarray,
    sensors: Sequence[Sensor],
    seed: int,
    noise_floor: float = NOISE_FLOOR_DEFAULT,
) -> MeasurementSet:
    """Clean forward data F q plus per-sensor Gaussian noise set by SNR.

    Noise variances follow ``signal_variances`` applied to the clean
    signal: per-sensor entry variance for samplers, pooled across the jar
    network for single-reading jars.
    """
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("emission vector must be finite")
    clean = f_matrix @ q
    if len(clean) != sum(measurement_count(s) for s in sensors):
        raise ValueError("F row count does not match the sensors' measurement counts")
    noise_var = signal_variances(clean, sensors, noise_floor)
    rng = np.random.default_rng(seed)
    values = clean + rng.normal(0.0, np.sqrt(noise_var))
    ids, indices, units = [], [], []
    for sensor, rows in _sensor_slices(sensors):
        m = rows.stop - rows.start
        ids.extend([sensor.id] * m)
        indices.extend(range(m))
        units.extend([_unit_of(sensor)] * m)
    return MeasurementSet(
        sensor_ids=tuple(ids),
        indices=np.array(indices, dtype=int),
        values=values,
        noise_var=noise_var,
        units=tuple(units),
    )
