"""Readers and writers for all file formats the pipeline touches.

CSV artifacts carry the run's config hash as a ``# config_hash=...``
comment line above the header; loaders skip any leading ``#`` lines, and
the header row itself is fixed byte-for-byte per format. Timestamps are
ISO-8601; naive values are treated as UTC.
"""

from __future__ import annotations

import csv
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .errors import ValidationError
from .observation import (
    DustfallJar,
    MeasurementSet,
    RealTimeSampler,
    Sensor,
    TimeGrid,
    measurement_count,
    signal_variances,
)
from .uqprop import DepositionGrid
from .windprep import RawWindRecord

__all__ = [
    "WIND_HEADER",
    "MEASUREMENTS_HEADER",
    "EMISSIONS_HEADER",
    "GRID_HEADER",
    "TRUTH_HEADER",
    "parse_timestamp",
    "format_timestamp",
    "load_wind_csv",
    "write_wind_csv",
    "load_sensors",
    "write_sensors",
    "load_measurements",
    "write_measurements",
    "write_emissions_csv",
    "write_truth_csv",
    "write_grid_csv",
    "write_json",
    "read_json",
]

logger = logging.getLogger(__name__)

WIND_HEADER = "timestamp,speed_mps,direction_deg_from"
MEASUREMENTS_HEADER = "sensor_id,index,value"
EMISSIONS_HEADER = "source_id,time,mean_kg_s,std_kg_s"
GRID_HEADER = "x_m,y_m,mean_mg_m2,std_mg_m2"
TRUTH_HEADER = "source_id,time,rate_kg_s"

KG_TO_MG = 1.0e6


def parse_timestamp(text: str) -> float:
    """ISO-8601 to epoch seconds; naive values count as UTC."""
    cleaned = text.strip()
    if cleaned.endswith(("Z", "z")):
        cleaned = cleaned[:-1] + "+00:00"
    try:
        stamp = datetime.fromisoformat(cleaned)
    except ValueError as exc:
        raise ValidationError(f"invalid ISO-8601 timestamp {text!r}") from exc
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def format_timestamp(epoch: float) -> str:
    return (
        datetime.fromtimestamp(epoch, tz=timezone.utc)
        .isoformat()
        .replace("+00:00", "Z")
    )


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def _data_lines(path: Path):
    """Yield (line_number, raw_line) skipping blank and comment lines."""
    with open(path, newline="") as handle:
        for lineno, raw in enumerate(handle, start=1):
            stripped = raw.rstrip("\n").rstrip("\r")
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, stripped


def _check_header(path: Path, line: str, expected: str) -> None:
    if line != expected:
        raise ValidationError(
            f"{path}: expected header {expected!r}, found {line!r}"
        )


def load_wind_csv(path) -> list:
    """Wind records from CSV; rows may be unordered, duplicates keep last."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"wind file not found: {path}")
    rows = []
    header_seen = False
    for lineno, line in _data_lines(path):
        if not header_seen:
            _check_header(path, line, WIND_HEADER)
            header_seen = True
            continue
        parts = next(csv.reader([line]))
        if len(parts) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 fields, found {len(parts)}")
        try:
            record = RawWindRecord(
                timestamp=parse_timestamp(parts[0]),
                speed=float(parts[1]),
                direction_from=float(parts[2]),
            )
        except (ValueError, ValidationError) as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        rows.append(record)
    if not header_seen:
        raise ValidationError(f"{path}: empty wind file")
    if not rows:
        raise ValidationError(f"{path}: no wind records")
    rows.sort(key=lambda r: r.timestamp)
    deduped = []
    for rec in rows:
        if deduped and deduped[-1].timestamp == rec.timestamp:
            logger.warning("duplicate wind timestamp %s; keeping the last row", rec.timestamp)
            deduped[-1] = rec
        else:
            deduped.append(rec)
    return deduped


def write_wind_csv(path, records: Sequence[RawWindRecord], cfg_hash: str) -> None:
    path = Path(path)
    with open(path, "w", newline="") as handle:
        handle.write(f"# config_hash={cfg_hash}\n")
        handle.write(WIND_HEADER + "\n")
        for rec in records:
            handle.write(
                f"{format_timestamp(rec.timestamp)},{_fmt(rec.speed)},{_fmt(rec.direction_from)}\n"
            )


def _sensor_from_entry(entry: dict, where: str) -> Sensor:
    def need(key):
        if key not in entry:
            raise ValidationError(f"{where}: missing field {key!r}")
        return entry[key]

    kind = str(need("kind"))
    common = dict(
        id=str(need("id")),
        x=float(need("x_m")),
        y=float(need("y_m")),
        z=float(need("z_m")),
        snr=float(need("snr")),
    )
    try:
        if kind == "dustfall_jar":
            return DustfallJar(area=float(need("area_m2")), **common)
        if kind == "realtime_sampler":
            window = float(need("window_s"))
            if "start_times" in entry:
                starts = tuple(parse_timestamp(str(t)) for t in entry["start_times"])
            elif "schedule" in entry:
                sched = entry["schedule"]
                first = parse_timestamp(str(sched["start"]))
                every = float(sched["every_s"])
                count = int(sched["count"])
                if every <= 0 or count < 1:
                    raise ValidationError(f"{where}: schedule needs every_s > 0 and count >= 1")
                starts = tuple(first + every * k for k in range(count))
            else:
                raise ValidationError(f"{where}: sampler needs start_times or schedule")
            return RealTimeSampler(window=window, start_times=starts, **common)
    except (TypeError, ValueError, KeyError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc
    raise ValidationError(f"{where}: unknown sensor kind {kind!r}")


def load_sensors(path) -> list:
    """Sensor registry from structured YAML."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"sensors file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict) or "sensors" not in data:
        raise ValidationError(f"{path}: expected a top-level 'sensors' list")
    entries = data["sensors"]
    if not isinstance(entries, list) or not entries:
        raise ValidationError(f"{path}: 'sensors' must be a non-empty list")
    sensors = [
        _sensor_from_entry(entry, f"{path}: sensors[{i}]") for i, entry in enumerate(entries)
    ]
    ids = [s.id for s in sensors]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: sensor ids must be unique")
    return sensors


def write_sensors(path, sensors: Sequence[Sensor], cfg_hash: str) -> None:
    entries = []
    for sensor in sensors:
        entry = {
            "id": sensor.id,
            "x_m": float(sensor.x),
            "y_m": float(sensor.y),
            "z_m": float(sensor.z),
            "snr": float(sensor.snr),
        }
        if isinstance(sensor, DustfallJar):
            entry["kind"] = "dustfall_jar"
            entry["area_m2"] = float(sensor.area)
        else:
            entry["kind"] = "realtime_sampler"
            entry["window_s"] = float(sensor.window)
            entry["start_times"] = [format_timestamp(t) for t in sensor.start_times]
        entries.append(entry)
    payload = {"config_hash": cfg_hash, "sensors": entries}
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=False))


def load_measurements(
    path,
    sensors: Sequence[Sensor],
    noise_floor: float = 1e-12,
    noise_var: Optional[np.ndarray] = None,
) -> MeasurementSet:
    """Measured values stacked in sensor declaration order.

    Every declared measurement slot must appear exactly once. Noise
    variances default to the measured-value variance over each sensor's
    entries (pooled across the jar network for single-reading jars)
    divided by the sensor's SNR, the only observable proxy in real-data
    mode; pass ``noise_var`` to override with known values.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"measurements file not found: {path}")
    by_id = {s.id: s for s in sensors}
    seen = {}
    header_seen = False
    for lineno, line in _data_lines(path):
        if not header_seen:
            _check_header(path, line, MEASUREMENTS_HEADER)
            header_seen = True
            continue
        parts = next(csv.reader([line]))
        if len(parts) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 fields, found {len(parts)}")
        sid = parts[0]
        if sid not in by_id:
            raise ValidationError(f"{path}:{lineno}: unknown sensor id {sid!r}")
        try:
            index = int(parts[1])
            value = float(parts[2])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        sensor = by_id[sid]
        m = measurement_count(sensor)
        if not 0 <= index < m:
            if isinstance(sensor, DustfallJar) and index >= 1:
                raise ValidationError(
                    f"{path}:{lineno}: jar {sid!r} yields a single value per period"
                )
            raise ValidationError(f"{path}:{lineno}: index {index} out of range for {sid!r}")
        if (sid, index) in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate measurement ({sid!r}, {index})")
        seen[(sid, index)] = value
    if not header_seen:
        raise ValidationError(f"{path}: empty measurements file")

    ids, indices, values, units = [], [], [], []
    for sensor in sensors:
        for ell in range(measurement_count(sensor)):
            if (sensor.id, ell) not in seen:
                raise ValidationError(
                    f"{path}: missing measurement ({sensor.id!r}, {ell})"
                )
            ids.append(sensor.id)
            indices.append(ell)
            values.append(seen[(sensor.id, ell)])
            units.append("kg" if isinstance(sensor, DustfallJar) else "kg_m3")
    values = np.array(values)
    if noise_var is None:
        noise_var = signal_variances(values, sensors, noise_floor)
    else:
        noise_var = np.asarray(noise_var, dtype=float)
    return MeasurementSet(
        sensor_ids=tuple(ids),
        indices=np.array(indices, dtype=int),
        values=values,
        noise_var=noise_var,
        units=tuple(units),
    )


def write_measurements(path, measurements: MeasurementSet, cfg_hash: str) -> None:
    with open(Path(path), "w", newline="") as handle:
        handle.write(f"# config_hash={cfg_hash}\n")
        handle.write(MEASUREMENTS_HEADER + "\n")
        for sid, index, value, _unit in measurements.entries:
            handle.write(f"{sid},{index},{_fmt(value)}\n")


def write_emissions_csv(
    path,
    source_ids: Sequence[str],
    grid: TimeGrid,
    mean: np.ndarray,
    std: np.ndarray,
    cfg_hash: str,
) -> None:
    """Source-major emission estimates, one row per (source, slot time)."""
    times = [format_timestamp(t) for t in grid.times]
    with open(Path(path), "w", newline="") as handle:
        handle.write(f"# config_hash={cfg_hash}\n")
        handle.write(EMISSIONS_HEADER + "\n")
        for i, sid in enumerate(source_ids):
            base = i * grid.n_steps
            for j, stamp in enumerate(times):
                handle.write(
                    f"{sid},{stamp},{_fmt(mean[base + j])},{_fmt(std[base + j])}\n"
                )


def write_truth_csv(
    path, source_ids: Sequence[str], grid: TimeGrid, q_true: np.ndarray, cfg_hash: str
) -> None:
    times = [format_timestamp(t) for t in grid.times]
    with open(Path(path), "w", newline="") as handle:
        handle.write(f"# config_hash={cfg_hash}\n")
        handle.write(TRUTH_HEADER + "\n")
        for i, sid in enumerate(source_ids):
            base = i * grid.n_steps
            for j, stamp in enumerate(times):
                handle.write(f"{sid},{stamp},{_fmt(q_true[base + j])}\n")


def write_grid_csv(path, deposition: DepositionGrid, cfg_hash: str) -> None:
    """Deposition map in display units (mg m^-2), row-major by y then x."""
    points = deposition.grid.points()
    with open(Path(path), "w", newline="") as handle:
        handle.write(f"# config_hash={cfg_hash}\n")
        handle.write(GRID_HEADER + "\n")
        for p in range(deposition.grid.n_cells):
            handle.write(
                f"{_fmt(points[p, 0])},{_fmt(points[p, 1])},"
                f"{_fmt(deposition.mean[p] * KG_TO_MG)},{_fmt(deposition.std[p] * KG_TO_MG)}\n"
            )


def write_json(path, payload: dict, cfg_hash: str) -> None:
    body = {"config_hash": cfg_hash}
    body.update(payload)
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
