"""Trial log CSV serialization and the on-disk run store.

The trial schema is one row per frame: trial_id, site, car_id, t_s,
pos_lat_m, pos_lon_m, heading_rad, speed_mps, plus optional accel_mps2
and ang_vel_radps left empty when a log does not carry them.  A run
store is a directory holding the canonical trials.csv together with the
ingest validation report.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import SchemaError
from .features import DyadTrial, Frame

__all__ = [
    "TRIAL_COLUMNS",
    "REQUIRED_COLUMNS",
    "read_trials",
    "write_trials",
    "write_store",
    "read_store",
    "canonical_json",
    "write_json",
]

TRIAL_COLUMNS = ("trial_id", "site", "car_id", "t_s", "pos_lat_m",
                 "pos_lon_m", "heading_rad", "speed_mps", "accel_mps2",
                 "ang_vel_radps")
REQUIRED_COLUMNS = TRIAL_COLUMNS[:8]
_FLOAT_FIELDS = ("t_s", "pos_lat_m", "pos_lon_m", "heading_rad", "speed_mps")
_OPTIONAL_FIELDS = ("accel_mps2", "ang_vel_radps")

STORE_TRIALS = "trials.csv"
STORE_REPORT = "ingest.json"


def _fmt(value) -> str:
    return "" if value is None else f"{value:.12g}"


def write_trials(path, trials) -> None:
    """Write a corpus to one CSV, frames grouped by trial then car."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIAL_COLUMNS)
        for trial in trials:
            for car in ("A", "B"):
                for f in trial.traj(car):
                    writer.writerow([
                        trial.trial_id, trial.site, car, _fmt(f.t),
                        _fmt(f.pos_lat), _fmt(f.pos_lon), _fmt(f.heading),
                        _fmt(f.speed), _fmt(f.accel), _fmt(f.ang_vel),
                    ])


def _parse_float(row, field, path, line) -> float:
    raw = row.get(field, "")
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise SchemaError(f"column {field!r} is not a number: {raw!r}",
                          path=path, line=line) from None
    if not np.isfinite(value):
        raise SchemaError(f"column {field!r} is not finite: {raw!r}",
                          path=path, line=line)
    return value


def _parse_optional(row, field, path, line):
    raw = row.get(field)
    if raw is None or raw == "":
        return None
    return _parse_float(row, field, path, line)


def read_trials(path) -> list[DyadTrial]:
    """Parse a trial CSV into DyadTrial objects, in file order.

    Schema violations raise SchemaError carrying the file and line; a
    trial missing one car comes back flagged excluded rather than
    erroring, since the row-level schema cannot forbid it.
    """
    frames: dict[str, dict[str, list[Frame]]] = {}
    sites: dict[str, str] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise SchemaError("empty file, header row required", path=path)
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"missing columns: {missing}", path=path,
                              line=1)
        for row in reader:
            line = reader.line_num
            trial_id = row.get("trial_id") or ""
            if not trial_id:
                raise SchemaError("empty trial_id", path=path, line=line)
            site = row.get("site") or ""
            if not site:
                raise SchemaError("empty site", path=path, line=line)
            car = row.get("car_id")
            if car not in ("A", "B"):
                raise SchemaError(f"car_id must be A or B, got {car!r}",
                                  path=path, line=line)
            if trial_id not in sites:
                sites[trial_id] = site
                frames[trial_id] = {"A": [], "B": []}
                order.append(trial_id)
            elif sites[trial_id] != site:
                raise SchemaError(
                    f"trial {trial_id!r} appears under two sites "
                    f"({sites[trial_id]!r} and {site!r})",
                    path=path, line=line)
            frame = Frame(
                t=_parse_float(row, "t_s", path, line),
                pos_lat=_parse_float(row, "pos_lat_m", path, line),
                pos_lon=_parse_float(row, "pos_lon_m", path, line),
                heading=_parse_float(row, "heading_rad", path, line),
                speed=_parse_float(row, "speed_mps", path, line),
                accel=_parse_optional(row, "accel_mps2", path, line),
                ang_vel=_parse_optional(row, "ang_vel_radps", path, line),
            )
            existing = frames[trial_id][car]
            if existing and frame.t <= existing[-1].t:
                raise SchemaError(
                    f"t_s not strictly increasing for trial {trial_id!r} "
                    f"car {car}", path=path, line=line)
            existing.append(frame)

    trials = []
    for trial_id in order:
        per_car = frames[trial_id]
        missing_car = [c for c in ("A", "B") if not per_car[c]]
        trials.append(DyadTrial(
            trial_id=trial_id, site=sites[trial_id],
            traj_a=per_car["A"], traj_b=per_car["B"],
            excluded=bool(missing_car),
            exclusion_note=(f"missing car {missing_car[0]}"
                            if missing_car else None),
        ))
    return trials


def write_store(out_dir, trials, report) -> str:
    """Persist validated trials plus the ingest report under out_dir/store."""
    store = os.path.join(out_dir, "store")
    os.makedirs(store, exist_ok=True)
    write_trials(os.path.join(store, STORE_TRIALS), trials)
    write_json(os.path.join(store, STORE_REPORT), report)
    return store


def read_store(store_dir) -> list[DyadTrial]:
    path = os.path.join(store_dir, STORE_TRIALS)
    if not os.path.exists(path):
        raise SchemaError(f"no trial store at {store_dir!r}")
    return read_trials(path)


def _canon(obj):
    # fixed 12-significant-digit floats so identical runs serialize to
    # identical bytes; bool checked before int (bool subclasses int)
    if isinstance(obj, bool):
        return obj
    if isinstance(obj, (int, str)) or obj is None:
        return obj
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.12g}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_canon(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    return json.dumps(_canon(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))
