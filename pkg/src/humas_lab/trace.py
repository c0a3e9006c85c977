"""Domain types and ingestion for per-minute microservice traces.

A trace row carries, for one (service, machine type, minute): the container
count, the mean per-container workload in requests/second, and the mean
per-container CPU usage in mCore.  Traces are aligned onto an integer minute
grid per service; minutes where a machine type reported nothing are explicit
gaps, never zero-filled or interpolated.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRACE_COLUMNS = (
    "ts_minute",
    "service_id",
    "machine_type",
    "containers",
    "rps_per_container",
    "cpu_usage_mcore_per_container",
)
FLEET_COLUMNS = ("machine_type", "machine_count", "cores_per_machine", "is_standard")

# Sanity ceiling for per-container usage: ten standard container quotas.
DEFAULT_USAGE_SANITY_MCORE = 40_000.0


class TraceError(ValueError):
    """Malformed trace input; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class MetricSample:
    """One observation of one machine type of one service at one minute."""

    ts: int
    service_id: str
    machine_type: str
    containers: int
    rps_per_container: float
    usage_per_container: float

    def validate(self, usage_sanity_mcore: float = DEFAULT_USAGE_SANITY_MCORE,
                 line: int | None = None) -> None:
        if self.containers < 0:
            raise TraceError(f"negative container count {self.containers}", line)
        if self.rps_per_container < 0 or self.usage_per_container < 0:
            raise TraceError("negative per-container metric", line)
        if self.containers == 0 and (self.rps_per_container != 0.0
                                     or self.usage_per_container != 0.0):
            raise TraceError("zero containers with nonzero per-container metrics", line)
        if self.usage_per_container > usage_sanity_mcore:
            raise TraceError(
                f"usage {self.usage_per_container} mCore exceeds sanity bound "
                f"{usage_sanity_mcore}", line)


@dataclass(frozen=True)
class FleetEntry:
    machine_type: str
    machine_count: int
    cores_per_machine: int
    is_standard: bool


@dataclass(frozen=True)
class MachineFleet:
    """Machine types available in the cluster, one marked as standard."""

    entries: tuple[FleetEntry, ...]

    def __post_init__(self):
        types = [e.machine_type for e in self.entries]
        if len(set(types)) != len(types):
            raise ValueError("duplicate machine_type in fleet")
        standards = [e for e in self.entries if e.is_standard]
        if len(standards) != 1:
            raise ValueError(f"fleet must have exactly one standard type, got {len(standards)}")
        for e in self.entries:
            if e.machine_count <= 0 or e.cores_per_machine <= 0:
                raise ValueError(f"non-positive machine count/cores for {e.machine_type}")

    @property
    def standard_type(self) -> str:
        return next(e.machine_type for e in self.entries if e.is_standard)

    @property
    def machine_types(self) -> tuple[str, ...]:
        return tuple(e.machine_type for e in self.entries)

    def entry(self, machine_type: str) -> FleetEntry:
        for e in self.entries:
            if e.machine_type == machine_type:
                return e
        raise KeyError(machine_type)


@dataclass
class TypeSeries:
    """Per-type metric arrays on the service grid; NaN/absent marks gaps."""

    containers: np.ndarray  # int64, 0 where missing
    rps: np.ndarray         # float64, NaN where missing
    usage: np.ndarray       # float64, NaN where missing
    present: np.ndarray     # bool


@dataclass
class ServiceTrace:
    """All observations of one service on a shared integer minute grid.

    The grid is contiguous from `ts0` with `sampling_period` spacing; each
    machine type holds aligned arrays with explicit presence flags.
    Immutable by convention after loading.
    """

    service_id: str
    ts0: int
    n_minutes: int
    sampling_period: int = 1
    types: dict[str, TypeSeries] = field(default_factory=dict)
    origin_iso8601: str | None = None

    @property
    def ts(self) -> np.ndarray:
        return self.ts0 + np.arange(self.n_minutes, dtype=np.int64) * self.sampling_period

    def grid_index(self, t: int) -> int:
        off = t - self.ts0
        idx, rem = divmod(off, self.sampling_period)
        if rem != 0 or idx < 0 or idx >= self.n_minutes:
            raise KeyError(f"minute {t} not on grid of service {self.service_id}")
        return int(idx)

    def machine_types(self) -> tuple[str, ...]:
        return tuple(sorted(self.types))


def _build_service_trace(service_id: str, rows_by_type: dict[str, list[MetricSample]],
                         sampling_period: int, origin: str | None) -> ServiceTrace:
    ts_min = min(r.ts for rows in rows_by_type.values() for r in rows)
    ts_max = max(r.ts for rows in rows_by_type.values() for r in rows)
    span = ts_max - ts_min
    if span % sampling_period != 0:
        raise TraceError(f"service {service_id}: ts span {span} not a multiple of "
                         f"sampling period {sampling_period}")
    n = span // sampling_period + 1
    trace = ServiceTrace(service_id=service_id, ts0=ts_min, n_minutes=n,
                         sampling_period=sampling_period, origin_iso8601=origin)
    for mtype, rows in rows_by_type.items():
        containers = np.zeros(n, dtype=np.int64)
        rps = np.full(n, np.nan)
        usage = np.full(n, np.nan)
        present = np.zeros(n, dtype=bool)
        for r in rows:
            off = r.ts - ts_min
            idx, rem = divmod(off, sampling_period)
            if rem != 0:
                raise TraceError(f"service {service_id} type {mtype}: ts {r.ts} off grid")
            containers[idx] = r.containers
            rps[idx] = r.rps_per_container
            usage[idx] = r.usage_per_container
            present[idx] = True
        trace.types[mtype] = TypeSeries(containers, rps, usage, present)
    return trace


def load_trace(path: str | Path, fleet: MachineFleet, *,
               usage_sanity_mcore: float = DEFAULT_USAGE_SANITY_MCORE,
               ) -> dict[str, ServiceTrace]:
    """Parse a trace CSV into one ServiceTrace per service.

    Rejects rows referencing machine types absent from `fleet`,
    non-monotonic timestamps per (service, type), and malformed rows,
    always naming the offending line.
    """
    path = Path(path)
    sampling_period, origin = read_trace_sidecar(path)
    known_types = set(fleet.machine_types)
    per_service: dict[str, dict[str, list[MetricSample]]] = {}
    last_ts: dict[tuple[str, str], int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise TraceError(f"bad header {header!r}, expected {','.join(TRACE_COLUMNS)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_COLUMNS):
                raise TraceError(f"expected {len(TRACE_COLUMNS)} fields, got {len(row)}", lineno)
            try:
                sample = MetricSample(
                    ts=int(row[0]), service_id=row[1], machine_type=row[2],
                    containers=int(row[3]), rps_per_container=float(row[4]),
                    usage_per_container=float(row[5]))
            except ValueError as exc:
                raise TraceError(f"unparseable field ({exc})", lineno) from exc
            sample.validate(usage_sanity_mcore, line=lineno)
            if sample.machine_type not in known_types:
                raise TraceError(f"unknown machine_type {sample.machine_type!r}", lineno)
            key = (sample.service_id, sample.machine_type)
            prev = last_ts.get(key)
            if prev is not None and sample.ts <= prev:
                raise TraceError(
                    f"non-monotonic ts {sample.ts} after {prev} for service "
                    f"{sample.service_id!r} type {sample.machine_type!r}", lineno)
            last_ts[key] = sample.ts
            per_service.setdefault(sample.service_id, {}).setdefault(
                sample.machine_type, []).append(sample)
    return {
        sid: _build_service_trace(sid, rows_by_type, sampling_period, origin)
        for sid, rows_by_type in per_service.items()
    }


def write_trace(traces: dict[str, ServiceTrace], path: str | Path) -> None:
    """Write traces in canonical row order (service_id, ts, machine_type).

    Floats are formatted with repr so a load/write cycle of our own files is
    byte-identical; missing grid points emit no row.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for sid in sorted(traces):
            tr = traces[sid]
            ts_grid = tr.ts
            for i in range(tr.n_minutes):
                for mtype in sorted(tr.types):
                    series = tr.types[mtype]
                    if not series.present[i]:
                        continue
                    writer.writerow([
                        int(ts_grid[i]), sid, mtype, int(series.containers[i]),
                        repr(float(series.rps[i])), repr(float(series.usage[i])),
                    ])
    first = next(iter(traces.values()), None)
    write_trace_sidecar(path,
                        sampling_period=first.sampling_period if first else 1,
                        origin=first.origin_iso8601 if first else None)


def sidecar_path(trace_path: str | Path) -> Path:
    return Path(str(trace_path) + ".meta.json")


def write_trace_sidecar(trace_path: str | Path, sampling_period: int = 1,
                        origin: str | None = None) -> None:
    meta = {"origin_iso8601": origin or "1970-01-01T00:00:00Z",
            "sampling_period_min": sampling_period}
    sidecar_path(trace_path).write_text(json.dumps(meta, sort_keys=True) + "\n",
                                        encoding="utf-8")


def read_trace_sidecar(trace_path: str | Path) -> tuple[int, str | None]:
    p = sidecar_path(trace_path)
    if not p.exists():
        return 1, None
    meta = json.loads(p.read_text(encoding="utf-8"))
    return int(meta.get("sampling_period_min", 1)), meta.get("origin_iso8601")


def load_fleet(path: str | Path) -> MachineFleet:
    path = Path(path)
    entries = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != FLEET_COLUMNS:
            raise TraceError(f"bad fleet header {header!r}", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise TraceError("expected 4 fields", lineno)
            try:
                entries.append(FleetEntry(row[0], int(row[1]), int(row[2]),
                                          bool(int(row[3]))))
            except ValueError as exc:
                raise TraceError(f"unparseable fleet field ({exc})", lineno) from exc
    return MachineFleet(tuple(entries))


def write_fleet(fleet: MachineFleet, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FLEET_COLUMNS)
        for e in fleet.entries:
            writer.writerow([e.machine_type, e.machine_count, e.cores_per_machine,
                             int(e.is_standard)])


class MissingRedFactor(KeyError):
    """A machine type was active at a minute but has no RED factor."""


def aggregate_over_types(trace: ServiceTrace, red, t: int):
    """Aggregate one minute across machine types.

    Returns (n_t, mean_rps, mean_norm_usage) with the per-container means
    weighted by container counts and usage divided by each type's RED factor,
    or None when no containers are present (the missing marker).
    """
    idx = trace.grid_index(t)
    n_t = 0
    rps_sum = 0.0
    usage_sum = 0.0
    for mtype in sorted(trace.types):
        series = trace.types[mtype]
        if not series.present[idx]:
            continue
        n_j = int(series.containers[idx])
        if n_j == 0:
            continue
        try:
            red_j = red[mtype] if not hasattr(red, "factor") else red.factor(mtype)
        except KeyError as exc:
            raise MissingRedFactor(f"no RED factor for active type {mtype!r} at t={t}") from exc
        n_t += n_j
        rps_sum += n_j * float(series.rps[idx])
        usage_sum += n_j * (float(series.usage[idx]) / red_j)
    if n_t == 0:
        return None
    return n_t, rps_sum / n_t, usage_sum / n_t


def aggregate_series(trace: ServiceTrace, red):
    """Vectorized aggregate_over_types over the whole grid.

    Returns (n_t, mean_rps, mean_norm_usage, valid) arrays; invalid minutes
    (no containers anywhere) hold 0 / NaN / NaN / False.
    """
    n = trace.n_minutes
    n_t = np.zeros(n, dtype=np.int64)
    rps_sum = np.zeros(n)
    usage_sum = np.zeros(n)
    for mtype in sorted(trace.types):
        series = trace.types[mtype]
        try:
            red_j = red[mtype] if not hasattr(red, "factor") else red.factor(mtype)
        except KeyError:
            if bool(np.any(series.present & (series.containers > 0))):
                raise MissingRedFactor(f"no RED factor for active type {mtype!r}")
            continue
        active = series.present & (series.containers > 0)
        cnt = np.where(active, series.containers, 0)
        n_t += cnt
        rps_sum += np.where(active, cnt * series.rps, 0.0)
        usage_sum += np.where(active, cnt * series.usage / red_j, 0.0)
    valid = n_t > 0
    safe = np.where(valid, n_t, 1)
    mean_rps = np.where(valid, rps_sum / safe, np.nan)
    mean_usage = np.where(valid, usage_sum / safe, np.nan)
    return n_t, mean_rps, mean_usage, valid


def trace_minutes(traces: dict[str, ServiceTrace]) -> int:
    """Common grid length shared by all services; raises if grids disagree."""
    spans = {(tr.ts0, tr.n_minutes, tr.sampling_period) for tr in traces.values()}
    if len(spans) != 1:
        raise ValueError(f"services disagree on the time grid: {sorted(spans)}")
    (_, n, _), = spans
    return n


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def ceil_float(x: float) -> int:
    return int(math.ceil(x))
