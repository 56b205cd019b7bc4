"""Tests for the observation map: window quadrature, stacking, noise model.

The reference path below rebuilds every measurement by an explicit loop
over
grid steps and window weights, so it shares no assembly code (einsum,
reshape, block stacking) with the production matrix builder.
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from plumeinv.errors import CalmWindError, ConfigurationError
from plumeinv.observation import (
    DustfallJar,
    MeasurementSet,
    RealTimeSampler,
    TimeGrid,
    assemble_F,
    assemble_G,
    assemble_M,
    measurement_count,
    measurement_layout,
    signal_variances,
    simulate_measurements,
    window_weight,
)
from plumeinv.plume import ParticleProperties, SourceSite, StabilityClass, kernel_profile

PARTICLE = ParticleProperties(density=2600.0, diameter=1e-5, w_dep=1.2e-2, w_set=7.8641975308642e-3)

GRID = TimeGrid(t0=0.0, dt=600.0, n_steps=10)

SITES = [
    SourceSite(id="src_a", x=0.0, y=0.0, height=5.0),
    SourceSite(id="src_b", x=80.0, y=-40.0, height=2.0),
]

JAR = DustfallJar(id="jar_x", x=150.0, y=10.0, z=1.5, area=0.02, snr=10.0)
SAMPLER_1 = RealTimeSampler(
    id="rt_1", x=200.0, y=-30.0, z=3.0, window=1200.0,
    start_times=(0.0, 1200.0, 2400.0, 3600.0, 4800.0), snr=100.0,
)
SAMPLER_2 = RealTimeSampler(
    id="rt_2", x=120.0, y=60.0, z=2.0, window=600.0,
    start_times=(600.0, 3000.0), snr=100.0,
)
SENSORS = [JAR, SAMPLER_1, SAMPLER_2]


def make_wind(calm_step=None):
    """Varied but mostly-eastward wind; optionally one calm step."""
    rng = np.random.default_rng(7)
    speed = 3.0 + rng.uniform(-1.0, 1.0, GRID.n_steps)
    angle = rng.uniform(-0.4, 0.4, GRID.n_steps)
    u_x = speed * np.cos(angle)
    u_y = speed * np.sin(angle)
    if calm_step is not None:
        u_x[calm_step] = 0.02
        u_y[calm_step] = 0.02
    return SimpleNamespace(u_x=u_x, u_y=u_y)


class TestTimeGrid:
    def test_times_are_right_endpoints(self):
        grid = TimeGrid(t0=100.0, dt=50.0, n_steps=4)
        np.testing.assert_allclose(grid.times, [150.0, 200.0, 250.0, 300.0])
        assert grid.span == 200.0

    def test_validation(self):
        with pytest.raises(ValueError):
            TimeGrid(t0=0.0, dt=0.0, n_steps=5)
        with pytest.raises(ValueError):
            TimeGrid(t0=0.0, dt=-1.0, n_steps=5)
        with pytest.raises(ValueError):
            TimeGrid(t0=0.0, dt=60.0, n_steps=1)


class TestSensorTypes:
    def test_jar_validation(self):
        with pytest.raises(ValueError):
            DustfallJar(id="j", x=0, y=0, z=1.5, area=0.0, snr=10.0)
        with pytest.raises(ValueError):
            DustfallJar(id="j", x=0, y=0, z=1.5, area=0.02, snr=0.0)

    def test_sampler_validation(self):
        with pytest.raises(ValueError):
            RealTimeSampler(id="s", x=0, y=0, z=3, window=0.0, start_times=(0.0,), snr=100.0)
        with pytest.raises(ValueError):
            RealTimeSampler(id="s", x=0, y=0, z=3, window=600.0, start_times=(), snr=100.0)
        with pytest.raises(ValueError):
            RealTimeSampler(
                id="s", x=0, y=0, z=3, window=600.0, start_times=(0.0, 0.0), snr=100.0
            )
        with pytest.raises(ValueError):
            RealTimeSampler(
                id="s", x=0, y=0, z=3, window=600.0, start_times=(1200.0, 600.0), snr=100.0
            )

    def test_measurement_count(self):
        assert measurement_count(JAR) == 1
        assert measurement_count(SAMPLER_1) == 5
        assert measurement_count(SAMPLER_2) == 2

    def test_layout_order(self):
        layout = measurement_layout(SENSORS)
        assert layout[0] == ("jar_x", 0)
        assert layout[1:6] == [("rt_1", k) for k in range(5)]
        assert layout[6:] == [("rt_2", 0), ("rt_2", 1)]


class TestWindowWeight:
    def test_jar_weight_inside_period(self):
        w = window_weight(JAR, 0, 300.0, GRID, PARTICLE.w_dep)
        assert w == JAR.area * PARTICLE.w_dep

    def test_jar_period_is_left_open(self):
        # t0 itself is outside, t0 + span is the last included instant
        assert window_weight(JAR, 0, GRID.t0, GRID, PARTICLE.w_dep) == 0.0
        assert window_weight(JAR, 0, GRID.t0 + GRID.span, GRID, PARTICLE.w_dep) > 0.0
        assert window_weight(JAR, 0, GRID.t0 + GRID.span + 1.0, GRID, PARTICLE.w_dep) == 0.0

    def test_sampler_window_is_left_open(self):
        w_in = window_weight(SAMPLER_1, 1, 2400.0, GRID, PARTICLE.w_dep)
        assert w_in == 1.0 / SAMPLER_1.window
        assert window_weight(SAMPLER_1, 1, 1200.0, GRID, PARTICLE.w_dep) == 0.0
        assert window_weight(SAMPLER_1, 1, 2401.0, GRID, PARTICLE.w_dep) == 0.0

    def test_bad_index_raises(self):
        with pytest.raises(IndexError):
            window_weight(JAR, 1, 300.0, GRID, PARTICLE.w_dep)
        with pytest.raises(IndexError):
            window_weight(SAMPLER_1, 5, 300.0, GRID, PARTICLE.w_dep)


class TestAssembleM:
    def test_jar_row_is_uniform(self):
        m = assemble_M(JAR, GRID, PARTICLE.w_dep)
        expected = np.full((1, GRID.n_steps), JAR.area * PARTICLE.w_dep * GRID.dt)
        np.testing.assert_array_equal(m, expected)

    def test_sampler_rows_rectangle_rule(self):
        m = assemble_M(SAMPLER_1, GRID, PARTICLE.w_dep)
        assert m.shape == (5, 10)
        # window ell covers grid slots 2*ell+1 and 2*ell+2 (1-based times)
        expected = np.zeros((5, 10))
        for ell in range(5):
            expected[ell, 2 * ell : 2 * ell + 2] = GRID.dt / SAMPLER_1.window
        np.testing.assert_array_equal(m, expected)
        # each window averages a full slot span, so rows sum to one
        np.testing.assert_allclose(m.sum(axis=1), 1.0)

    def test_window_before_grid_raises(self):
        bad = RealTimeSampler(
            id="s", x=0, y=0, z=3, window=600.0, start_times=(-600.0,), snr=100.0
        )
        with pytest.raises(ConfigurationError):
            assemble_M(bad, GRID, PARTICLE.w_dep)

    def test_window_past_grid_raises(self):
        bad = RealTimeSampler(
            id="s", x=0, y=0, z=3, window=1200.0, start_times=(5400.0,), snr=100.0
        )
        with pytest.raises(ConfigurationError):
            assemble_M(bad, GRID, PARTICLE.w_dep)

    def test_window_missing_grid_points_raises(self):
        # (60, 300] contains no multiple of 600
        bad = RealTimeSampler(
            id="s", x=0, y=0, z=3, window=240.0, start_times=(60.0,), snr=100.0
        )
        with pytest.raises(ConfigurationError):
            assemble_M(bad, GRID, PARTICLE.w_dep)

    def test_exact_span_is_allowed(self):
        full = RealTimeSampler(
            id="s", x=0, y=0, z=3, window=GRID.span, start_times=(GRID.t0,), snr=100.0
        )
        m = assemble_M(full, GRID, PARTICLE.w_dep)
        np.testing.assert_allclose(m, GRID.dt / GRID.span)


class TestAssembleG:
    def test_shapes_and_values_match_profile(self):
        wind = make_wind()
        tables = assemble_G(SENSORS, SITES, wind, GRID, PARTICLE, StabilityClass.D)
        assert len(tables) == len(SENSORS)
        points = np.array([s.location for s in SENSORS])
        for j in range(GRID.n_steps):
            profile = kernel_profile(
                points, SITES, (wind.u_x[j], wind.u_y[j]), PARTICLE, StabilityClass.D
            )
            for k in range(len(SENSORS)):
                np.testing.assert_array_equal(tables[k][j], profile[k])

    def test_calm_step_contributes_zero(self):
        tables = assemble_G(SENSORS, SITES, make_wind(calm_step=4), GRID, PARTICLE, StabilityClass.D)
        for table in tables:
            assert np.all(table[4] == 0.0)
            assert np.any(table[3] != 0.0)

    def test_wind_length_mismatch_raises(self):
        wind = SimpleNamespace(u_x=np.ones(3), u_y=np.ones(3))
        with pytest.raises(ValueError):
            assemble_G(SENSORS, SITES, wind, GRID, PARTICLE, StabilityClass.D)


def reference_forward(q_by_source, wind):
    """Direct quadrature of every measurement, no matrix assembly.

    q_by_source: (n_sources, n_steps) rates. Returns the stacked data
    vector in sensor declaration order.
    """
    times = GRID.times
    points = np.array([s.location for s in SENSORS])
    kern = np.zeros((GRID.n_steps, len(SENSORS), len(SITES)))
    for j in range(GRID.n_steps):
        try:
            kern[j] = kernel_profile(
                points, SITES, (wind.u_x[j], wind.u_y[j]), PARTICLE, StabilityClass.D
            )
        except CalmWindError:
            pass  # calm slots transport nothing
    out = []
    for k, sensor in enumerate(SENSORS):
        for ell in range(measurement_count(sensor)):
            total = 0.0
            for j, t in enumerate(times):
                weight = window_weight(sensor, ell, t, GRID, PARTICLE.w_dep)
                for i in range(len(SITES)):
                    total += weight * GRID.dt * kern[j, k, i] * q_by_source[i, j]
            out.append(total)
    return np.array(out)


class TestAssembleF:
    def test_matches_direct_quadrature(self):
        """Two sources, three sensors, ten steps, varying wind."""
        wind = make_wind()
        f = assemble_F(SENSORS, SITES, wind, GRID, PARTICLE, StabilityClass.D)
        assert f.shape == (8, 2 * GRID.n_steps)
        rng = np.random.default_rng(11)
        q_by_source = rng.uniform(0.1, 2.0, (len(SITES), GRID.n_steps))
        expected = reference_forward(q_by_source, wind)
        np.testing.assert_allclose(f @ q_by_source.ravel(), expected, rtol=1e-12)

    def test_direct_quadrature_with_calm_gap(self):
        wind = make_wind(calm_step=6)
        f = assemble_F(SENSORS, SITES, wind, GRID, PARTICLE, StabilityClass.D)
        rng = np.random.default_rng(12)
        q_by_source = rng.uniform(0.1, 2.0, (len(SITES), GRID.n_steps))
        expected = reference_forward(q_by_source, wind)
        np.testing.assert_allclose(f @ q_by_source.ravel(), expected, rtol=1e-12)

    def test_stacking_is_source_major(self):
        """Feeding a one-hot emission vector reads out a single F column."""
        wind = make_wind()
        f = assemble_F(SENSORS, SITES, wind, GRID, PARTICLE, StabilityClass.D)
        i, j = 1, 4  # source src_b, slot 5
        q = np.zeros(2 * GRID.n_steps)
        q[i * GRID.n_steps + j] = 1.0
        by_source = np.zeros((2, GRID.n_steps))
        by_source[i, j] = 1.0
        np.testing.assert_allclose(f @ q, reference_forward(by_source, wind), rtol=1e-12)

    def test_no_sensors(self):
        f = assemble_F([], SITES, make_wind(), GRID, PARTICLE, StabilityClass.D)
        assert f.shape == (0, 2 * GRID.n_steps)


class TestSignalVariances:
    def test_sampler_uses_own_population_variance(self):
        values = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0])
        noise = signal_variances(values, SENSORS)
        np.testing.assert_allclose(noise[1:6], np.var(values[1:6]) / SAMPLER_1.snr)
        np.testing.assert_allclose(noise[6:8], np.var(values[6:8]) / SAMPLER_2.snr)

    def test_jars_pool_network_variance(self):
        jars = [
            DustfallJar(id=f"j{k}", x=10.0 * k, y=0.0, z=1.5, area=0.02, snr=snr)
            for k, snr in enumerate([10.0, 10.0, 40.0])
        ]
        values = np.array([1.0, 2.0, 4.0])
        noise = signal_variances(values, jars)
        pooled = np.var(values)
        np.testing.assert_allclose(noise, [pooled / 10.0, pooled / 10.0, pooled / 40.0])

    def test_single_jar_falls_back_to_floor(self):
        jar = DustfallJar(id="j", x=0, y=0, z=1.5, area=0.02, snr=10.0)
        noise = signal_variances(np.array([5.0]), [jar], noise_floor=1e-9)
        np.testing.assert_allclose(noise, [1e-18])

    def test_flat_sampler_signal_falls_back_to_floor(self):
        sampler = RealTimeSampler(
            id="s", x=0, y=0, z=3, window=600.0, start_times=(0.0, 600.0), snr=100.0
        )
        noise = signal_variances(np.array([3.0, 3.0]), [sampler], noise_floor=1e-6)
        np.testing.assert_allclose(noise, [1e-12, 1e-12])


class TestMeasurementSet:
    def _fields(self, n):
        return dict(
            sensor_ids=tuple("abcdefgh"[:n]),
            indices=np.zeros(n, dtype=int),
            values=np.arange(n, dtype=float),
            noise_var=np.ones(n),
            units=("kg",) * n,
        )

    def test_len_and_entries(self):
        ms = MeasurementSet(**self._fields(3))
        assert len(ms) == 3
        assert ms.entries[1] == ("b", 0, 1.0, "kg")

    def test_length_mismatch_raises(self):
        fields = self._fields(3)
        fields["noise_var"] = np.ones(2)
        with pytest.raises(ValueError):
            MeasurementSet(**fields)

    def test_nonpositive_noise_raises(self):
        fields = self._fields(3)
        fields["noise_var"] = np.array([1.0, 0.0, 1.0])
        with pytest.raises(ValueError):
            MeasurementSet(**fields)


class TestSimulateMeasurements:
    def setup_method(self):
        self.wind = make_wind()
        self.f = assemble_F(SENSORS, SITES, self.wind, GRID, PARTICLE, StabilityClass.D)
        rng = np.random.default_rng(13)
        self.q = rng.uniform(0.1, 2.0, 2 * GRID.n_steps)
        self.clean = self.f @ self.q

    def test_layout_metadata(self):
        ms = simulate_measurements(self.f, self.q, SENSORS, seed=0)
        assert ms.sensor_ids == ("jar_x",) + ("rt_1",) * 5 + ("rt_2",) * 2
        np.testing.assert_array_equal(ms.indices, [0, 0, 1, 2, 3, 4, 0, 1])
        assert ms.units == ("kg",) + ("kg_m3",) * 7

    def test_same_seed_reproduces(self):
        a = simulate_measurements(self.f, self.q, SENSORS, seed=42)
        b = simulate_measurements(self.f, self.q, SENSORS, seed=42)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.noise_var, b.noise_var)

    def test_different_seeds_differ(self):
        a = simulate_measurements(self.f, self.q, SENSORS, seed=1)
        b = simulate_measurements(self.f, self.q, SENSORS, seed=2)
        assert np.all(a.values != b.values)

    def test_noise_var_matches_signal_variances(self):
        ms = simulate_measurements(self.f, self.q, SENSORS, seed=0)
        np.testing.assert_array_equal(ms.noise_var, signal_variances(self.clean, SENSORS))

    def test_noise_is_zero_mean_with_declared_variance(self):
        n_seeds = 400
        resid = np.empty((n_seeds, len(self.clean)))
        for seed in range(n_seeds):
            ms = simulate_measurements(self.f, self.q, SENSORS, seed=seed)
            resid[seed] = ms.values - self.clean
        sd = np.sqrt(ms.noise_var)
        # mean within 4 standard errors, variance within 5 (chi-square SE)
        np.testing.assert_array_less(np.abs(resid.mean(axis=0)), 4.0 * sd / math.sqrt(n_seeds))
        var_err = np.abs(resid.var(axis=0) - ms.noise_var)
        np.testing.assert_array_less(var_err, 5.0 * ms.noise_var * math.sqrt(2.0 / n_seeds))

    def test_nonfinite_rates_raise(self):
        bad = self.q.copy()
        bad[3] = np.nan
        with pytest.raises(ValueError):
            simulate_measurements(self.f, bad, SENSORS, seed=0)

    def test_row_count_mismatch_raises(self):
        with pytest.raises(ValueError):
            simulate_measurements(self.f[:-1], self.q, SENSORS, seed=0)
