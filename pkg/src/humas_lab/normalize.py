"""Resource efficiency normalization.

RUE (resource usage effectiveness) is mean CPU usage per request.  RED is the
expected ratio of a machine type's RUE to the standard type's RUE; dividing a
type's usage by its RED expresses it in standard-machine units, which makes
totals comparable across heterogeneous hardware.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .trace import ServiceTrace, aggregate_series

log = logging.getLogger(__name__)

DEFAULT_RPS_FLOOR = 1.0
DEFAULT_MIN_SAMPLES = 60
RED_CLAMP = (0.25, 4.0)

RED_CSV_COLUMNS = ("service_id", "machine_type", "red", "sample_count", "low_confidence")


@dataclass(frozen=True)
class RedEntry:
    red: float
    sample_count: int
    low_confidence: bool
    window: tuple[int, int]


@dataclass
class RedTable:
    """Per (service, machine type) resource efficiency difference factors."""

    service_id: str
    standard_type: str
    entries: dict[str, RedEntry] = field(default_factory=dict)

    def factor(self, machine_type: str) -> float:
        return self.entries[machine_type].red

    def __getitem__(self, machine_type: str) -> float:
        return self.entries[machine_type].red

    def __contains__(self, machine_type: str) -> bool:
        return machine_type in self.entries

    def factors(self) -> dict[str, float]:
        return {t: e.red for t, e in self.entries.items()}


@dataclass
class TotalsSeries:
    """Total workload X_t, total normalized usage Y_t and container count n_t."""

    service_id: str
    ts0: int
    x: np.ndarray       # total RPS
    y: np.ndarray       # total normalized usage, mCore
    n: np.ndarray       # total containers
    valid: np.ndarray   # False where no containers reported

    @property
    def n_minutes(self) -> int:
        return len(self.x)


def compute_rue(usage_mean: float, rps_mean: float,
                rps_floor: float = DEFAULT_RPS_FLOOR) -> float | None:
    """Usage per request, or None when the load is below the floor.

    Low-load minutes are excluded rather than failed: RUE ratios are
    numerically unstable near zero load.
    """
    if rps_mean < rps_floor:
        return None
    return usage_mean / rps_mean


def rue_series(usage: np.ndarray, rps: np.ndarray,
               rps_floor: float = DEFAULT_RPS_FLOOR) -> np.ndarray:
    """Vectorized RUE with NaN where excluded (low load or missing)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(rps >= rps_floor, usage / rps, np.nan)
    return out


def estimate_red(trace: ServiceTrace, standard: str,
                 window: tuple[int, int] | None = None, *,
                 rps_floor: float = DEFAULT_RPS_FLOOR,
                 min_samples: int = DEFAULT_MIN_SAMPLES,
                 workload_weighted: bool = False) -> RedTable:
    """Estimate RED factors as the mean per-minute RUE ratio against standard.

    `window` is a half-open (from_ts, to_ts) minute range; None means the full
    trace.  Types with fewer than `min_samples` co-observed minutes are
    flagged low-confidence and defaulted to 1.0.  The optional
    workload-weighted mode weights each minute's ratio by its total RPS;
    the unweighted mean is the documented default.
    """
    if standard not in trace.types:
        raise KeyError(f"standard type {standard!r} absent from trace {trace.service_id}")
    if window is None:
        lo, hi = 0, trace.n_minutes
    else:
        lo = max(0, (window[0] - trace.ts0) // trace.sampling_period)
        hi = min(trace.n_minutes, (window[1] - trace.ts0) // trace.sampling_period)
        lo, hi = int(lo), int(hi)
    win = (int(trace.ts0 + lo * trace.sampling_period),
           int(trace.ts0 + hi * trace.sampling_period))
    std = trace.types[standard]
    std_rue = rue_series(std.usage[lo:hi], std.rps[lo:hi], rps_floor)
    std_ok = np.isfinite(std_rue) & (std_rue > 0) & std.present[lo:hi]

    table = RedTable(service_id=trace.service_id, standard_type=standard)
    for mtype in sorted(trace.types):
        if mtype == standard:
            # Standard is the normalization target by construction.
            table.entries[mtype] = RedEntry(1.0, int(np.sum(std_ok)), False, win)
            continue
        series = trace.types[mtype]
        rue = rue_series(series.usage[lo:hi], series.rps[lo:hi], rps_floor)
        ok = std_ok & np.isfinite(rue) & series.present[lo:hi]
        count = int(np.sum(ok))
        if count < min_samples:
            log.warning("service %s type %s: only %d co-observed samples in %s, "
                        "defaulting RED to 1.0 (low confidence)",
                        trace.service_id, mtype, count, win)
            table.entries[mtype] = RedEntry(1.0, count, True, win)
            continue
        ratios = rue[ok] / std_rue[ok]
        if workload_weighted:
            weights = (series.rps[lo:hi] * series.containers[lo:hi])[ok]
            red = float(np.sum(ratios * weights) / np.sum(weights))
        else:
            red = float(np.mean(ratios))
        clamped = min(max(red, RED_CLAMP[0]), RED_CLAMP[1])
        if clamped != red:
            log.warning("service %s type %s: RED %.4f clamped to %.4f",
                        trace.service_id, mtype, red, clamped)
        table.entries[mtype] = RedEntry(clamped, count, False, win)
    return table


def normalize_usage(usage_mean: float, red_j: float) -> float:
    """Express a per-container usage mean in standard-machine units."""
    if red_j <= 0:
        raise ValueError(f"RED factor must be positive, got {red_j}")
    return usage_mean / red_j


def build_totals(trace: ServiceTrace, red: RedTable) -> TotalsSeries:
    """Totals per minute: X_t = mean RPS x n_t, Y_t = mean normalized usage x n_t."""
    n_t, mean_rps, mean_usage, valid = aggregate_series(trace, red)
    x = np.where(valid, mean_rps * n_t, np.nan)
    y = np.where(valid, mean_usage * n_t, np.nan)
    return TotalsSeries(service_id=trace.service_id, ts0=trace.ts0,
                        x=x, y=y, n=n_t, valid=valid)


def write_red_csv(tables: list[RedTable], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RED_CSV_COLUMNS)
        for table in sorted(tables, key=lambda t: t.service_id):
            for mtype in sorted(table.entries):
                e = table.entries[mtype]
                writer.writerow([table.service_id, mtype, repr(e.red),
                                 e.sample_count, int(e.low_confidence)])
