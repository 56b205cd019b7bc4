"""Run configuration: YAML parsing, validation, hashing, env overrides.

The config file is nested key/value YAML. Relative input paths resolve
against the output directory (all artifacts of a run live together);
``out_dir`` itself resolves against the working directory. ``PLUME_SEED``
overrides the sampler seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ValidationError
from .plume import (
    CALM_SPEED_DEFAULT,
    X_CUTOFF_DEFAULT,
    ParticleProperties,
    SourceSite,
    StabilityClass,
)
from .synthetic import Harmonic, SourceSignal, SyntheticSpec, WindModel
from .uqprop import GridSpec
from .windprep import CV_MAX_POINTS_DEFAULT

__all__ = ["RunConfig", "load_config", "config_hash", "ENV_SEED", "ENV_THREADS"]

ENV_SEED = "PLUME_SEED"
ENV_THREADS = "PLUME_THREADS"


@dataclass(frozen=True)
class PathsConfig:
    wind_csv: str
    sensors_file: str
    measurements_csv: str
    out_dir: str


@dataclass(frozen=True)
class TimeConfig:
    start: str  # ISO-8601
    duration_s: float

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValidationError("time.duration_s must be positive")


@dataclass(frozen=True)
class PriorConfig:
    alpha: float = 1.0
    gamma: float = 5e-3


@dataclass(frozen=True)
class SamplerSettings:
    beta: float = 0.6
    n_steps: int = 100_000
    burn_in_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class GridConfig:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    n_x: int = 40
    n_y: int = 40
    n_modes: int = 100

    def spec(self) -> GridSpec:
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max, self.n_x, self.n_y)


@dataclass(frozen=True)
class PlumeSettings:
    x_cutoff_m: float = X_CUTOFF_DEFAULT
    calm_speed_mps: float = CALM_SPEED_DEFAULT


@dataclass(frozen=True)
class SyntheticConfig:
    spec: SyntheticSpec
    wind_model: WindModel
    sensors: tuple = ()
    wind_cadence_s: float = 600.0


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig
    time: TimeConfig
    particle: ParticleProperties
    stability: StabilityClass
    sources: tuple
    grid: GridConfig
    dt_inversion: float = 3600.0
    dt_generation: float = 1800.0
    prior: PriorConfig = field(default_factory=PriorConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    plume: PlumeSettings = field(default_factory=PlumeSettings)
    synthetic: Optional[SyntheticConfig] = None
    deposition_unit: str = "mg_m2"
    noise_floor: float = 1e-12
    allow_same_dt: bool = False
    wind_cv_max_points: int = CV_MAX_POINTS_DEFAULT

    def __post_init__(self) -> None:
        if self.dt_inversion <= 0 or self.dt_generation <= 0:
            raise ValidationError("time step sizes must be positive")
        if self.deposition_unit not in ("mg_m2", "kg_m2"):
            raise ValidationError(f"unknown deposition unit {self.deposition_unit!r}")
        if not self.sources:
            raise ValidationError("at least one source is required")
        for dt, name in ((self.dt_inversion, "dt_inversion"), (self.dt_generation, "dt_generation")):
            steps = self.time.duration_s / dt
            if abs(steps - round(steps)) > 1e-9:
                raise ValidationError(f"{name}={dt} does not divide the duration evenly")

    def resolve_out_dir(self) -> Path:
        return Path(self.paths.out_dir)

    def resolve_input(self, name: str) -> Path:
        raw = Path(getattr(self.paths, name))
        return raw if raw.is_absolute() else self.resolve_out_dir() / raw


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ValidationError(f"missing config key {where}.{key}" if where else f"missing config key {key}")
    return section[key]


def _number(section: dict, key: str, where: str, default=None) -> float:
    value = section.get(key, default) if default is not None else _require(section, key, where)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"config key {where}.{key} must be a number, got {value!r}")
    if not math.isfinite(float(value)):
        raise ValidationError(f"config key {where}.{key} must be finite")
    return float(value)


def _section(data: dict, key: str) -> dict:
    value = _require(data, key, "")
    if not isinstance(value, dict):
        raise ValidationError(f"config section {key!r} must be a mapping")
    return value


def _build_sources(items) -> tuple:
    if not isinstance(items, list) or not items:
        raise ValidationError("config key 'sources' must be a non-empty list")
    sources = []
    for i, item in enumerate(items):
        try:
            sources.append(
                SourceSite(
                    id=str(_require(item, "id", f"sources[{i}]")),
                    x=_number(item, "x_m", f"sources[{i}]"),
                    y=_number(item, "y_m", f"sources[{i}]"),
                    height=_number(item, "z_m", f"sources[{i}]"),
                )
            )
        except ValueError as exc:
            raise ValidationError(f"sources[{i}]: {exc}") from exc
    ids = [s.id for s in sources]
    if len(set(ids)) != len(ids):
        raise ValidationError("source ids must be unique")
    return tuple(sources)


def _build_harmonics(items, where: str) -> tuple:
    out = []
    for i, item in enumerate(items or []):
        out.append(
            Harmonic(
                amplitude=_number(item, "amplitude", f"{where}[{i}]"),
                period=_number(item, "period_s", f"{where}[{i}]"),
                phase=_number(item, "phase_rad", f"{where}[{i}]", default=0.0),
            )
        )
    return tuple(out)


def _build_synthetic(data: dict, n_sources: int) -> SyntheticConfig:
    wm = _section(data, "wind_model")
    model = WindModel(
        speed_base=_number(wm, "speed_base_mps", "synthetic.wind_model"),
        direction_base=_number(wm, "direction_base_deg", "synthetic.wind_model"),
        speed_harmonics=_build_harmonics(wm.get("speed_harmonics"), "synthetic.wind_model.speed_harmonics"),
        direction_harmonics=_build_harmonics(
            wm.get("direction_harmonics"), "synthetic.wind_model.direction_harmonics"
        ),
        min_speed=_number(wm, "min_speed_mps", "synthetic.wind_model", default=0.3),
    )
    raw_signals = _require(data, "signals", "synthetic")
    if not isinstance(raw_signals, list) or len(raw_signals) != n_sources:
        raise ValidationError(
            f"synthetic.signals must list one entry per source ({n_sources}), got "
            f"{len(raw_signals) if isinstance(raw_signals, list) else type(raw_signals).__name__}"
        )
    signals = []
    for i, item in enumerate(raw_signals):
        try:
            signals.append(
                SourceSignal(
                    amplitude=_number(item, "amplitude_kg_s", f"synthetic.signals[{i}]"),
                    omega=_number(item, "omega_rad_s", f"synthetic.signals[{i}]"),
                    phase=_number(item, "phase_rad", f"synthetic.signals[{i}]", default=0.0),
                    offset=_number(item, "offset_kg_s", f"synthetic.signals[{i}]"),
                )
            )
        except ValueError as exc:
            raise ValidationError(f"synthetic.signals[{i}]: {exc}") from exc
    spec = SyntheticSpec(signals=tuple(signals), clip=bool(data.get("clip", True)))

    from .io import _sensor_from_entry  # no import cycle: io does not import config

    raw_sensors = _require(data, "sensors", "synthetic")
    if not isinstance(raw_sensors, list) or not raw_sensors:
        raise ValidationError("synthetic.sensors must be a non-empty list")
    sensors = tuple(
        _sensor_from_entry(entry, f"synthetic.sensors[{i}]")
        for i, entry in enumerate(raw_sensors)
    )
    ids = [s.id for s in sensors]
    if len(set(ids)) != len(ids):
        raise ValidationError("synthetic sensor ids must be unique")
    return SyntheticConfig(
        spec=spec,
        wind_model=model,
        sensors=sensors,
        wind_cadence_s=_number(data, "wind_cadence_s", "synthetic", default=600.0),
    )


def _config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ValidationError("config root must be a mapping")
    paths_raw = _section(data, "paths")
    paths = PathsConfig(
        wind_csv=str(_require(paths_raw, "wind_csv", "paths")),
        sensors_file=str(_require(paths_raw, "sensors_file", "paths")),
        measurements_csv=str(_require(paths_raw, "measurements_csv", "paths")),
        out_dir=str(_require(paths_raw, "out_dir", "paths")),
    )
    time_raw = _section(data, "time")
    time_cfg = TimeConfig(
        start=str(_require(time_raw, "start", "time")),
        duration_s=_number(time_raw, "duration_s", "time"),
    )
    particle_raw = _section(data, "particle")
    try:
        particle = ParticleProperties(
            density=_number(particle_raw, "density_kg_m3", "particle"),
            diameter=_number(particle_raw, "diameter_m", "particle"),
            w_dep=_number(particle_raw, "w_dep_mps", "particle"),
            w_set=_number(particle_raw, "w_set_mps", "particle"),
        )
    except ValueError as exc:
        raise ValidationError(f"particle: {exc}") from exc
    stability_raw = str(_require(data, "stability_class", ""))
    try:
        stability = StabilityClass(stability_raw)
    except ValueError:
        raise ValidationError(f"unknown stability class {stability_raw!r} (expected A..F)")
    sources = _build_sources(_require(data, "sources", ""))
    grid_raw = _section(data, "grid")
    try:
        grid = GridConfig(
            x_min=_number(grid_raw, "x_min_m", "grid"),
            x_max=_number(grid_raw, "x_max_m", "grid"),
            y_min=_number(grid_raw, "y_min_m", "grid"),
            y_max=_number(grid_raw, "y_max_m", "grid"),
            n_x=int(_number(grid_raw, "n_x", "grid", default=40)),
            n_y=int(_number(grid_raw, "n_y", "grid", default=40)),
            n_modes=int(_number(grid_raw, "n_modes", "grid", default=100)),
        )
        grid.spec()
    except ValueError as exc:
        raise ValidationError(f"grid: {exc}") from exc

    prior_raw = data.get("prior", {})
    prior = PriorConfig(
        alpha=_number(prior_raw, "alpha", "prior", default=1.0),
        gamma=_number(prior_raw, "gamma", "prior", default=5e-3),
    )
    sampler_raw = data.get("sampler", {})
    sampler = SamplerSettings(
        beta=_number(sampler_raw, "beta", "sampler", default=0.6),
        n_steps=int(_number(sampler_raw, "n_steps", "sampler", default=100_000)),
        burn_in_fraction=_number(sampler_raw, "burn_in_fraction", "sampler", default=0.2),
        seed=int(_number(sampler_raw, "seed", "sampler", default=0)),
    )
    plume_raw = data.get("plume", {})
    plume = PlumeSettings(
        x_cutoff_m=_number(plume_raw, "x_cutoff_m", "plume", default=X_CUTOFF_DEFAULT),
        calm_speed_mps=_number(plume_raw, "calm_speed_mps", "plume", default=CALM_SPEED_DEFAULT),
    )
    synthetic = None
    if "synthetic" in data:
        synthetic = _build_synthetic(_section(data, "synthetic"), len(sources))

    try:
        return RunConfig(
            paths=paths,
            time=time_cfg,
            particle=particle,
            stability=stability,
            sources=sources,
            grid=grid,
            dt_inversion=_number(data, "dt_inversion_s", "", default=3600.0),
            dt_generation=_number(data, "dt_generation_s", "", default=1800.0),
            prior=prior,
            sampler=sampler,
            plume=plume,
            synthetic=synthetic,
            deposition_unit=str(data.get("deposition_unit", "mg_m2")),
            noise_floor=_number(data, "noise_floor", "", default=1e-12),
            allow_same_dt=bool(data.get("allow_same_dt", False)),
            wind_cv_max_points=int(_number(data, "wind_cv_max_points", "", default=CV_MAX_POINTS_DEFAULT)),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def _apply_overrides(cfg: RunConfig, out_dir=None, seed=None) -> RunConfig:
    from dataclasses import replace

    env_seed = os.environ.get(ENV_SEED)
    if seed is None and env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ValidationError(f"{ENV_SEED} must be an integer, got {env_seed!r}")
    if seed is not None:
        cfg = replace(cfg, sampler=replace(cfg.sampler, seed=int(seed)))
    if out_dir is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, out_dir=str(out_dir)))
    return cfg


def load_config(path, out_dir=None, seed=None) -> RunConfig:
    """Parse, validate, and apply overrides (CLI args beat PLUME_SEED)."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file {path} is not valid YAML: {exc}") from exc
    cfg = _config_from_dict(data)
    return _apply_overrides(cfg, out_dir=out_dir, seed=seed)


def _as_plain(obj):
    """Recursively convert config dataclasses to JSON-serializable data."""
    from dataclasses import fields, is_dataclass

    if is_dataclass(obj):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, StabilityClass):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    return obj


def config_dict(cfg: RunConfig) -> dict:
    return _as_plain(cfg)


def config_hash(cfg: RunConfig) -> str:
    """12-hex-char digest of the resolved configuration.

    File locations are excluded: the hash identifies the scientific
    content of a run, so the same case written to two directories yields
    identical artifacts.
    """
    plain = config_dict(cfg)
    plain.pop("paths", None)
    canon = json.dumps(plain, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
