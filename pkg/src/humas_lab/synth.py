"""Seeded synthetic multi-service trace generator.

Produces traces with known heterogeneity factors and injected version
upgrades, so drift detection and the end-to-end simulator can be scored
against ground truth.  Total workload is a daily sinusoid with multiplicative
lognormal noise; per-container usage follows a per-service base efficiency
that each upgrade rescales, ramped linearly over the upgrade's duration to
model progressive container rollout.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_for
from .trace import MachineFleet, ServiceTrace, TypeSeries

# Observed envelope of per-upgrade usage change rates.
CHANGE_RATE_ENVELOPE = (-0.771, 1.061)
MINUTES_PER_DAY = 1440

UPGRADES_COLUMNS = ("service_id", "start_ts_minute", "end_ts_minute", "rue_factor")


@dataclass(frozen=True)
class UpgradeEvent:
    service_id: str
    start_ts: int
    end_ts: int
    rue_factor: float

    def validate(self, max_duration_min: int = 480) -> None:
        if not self.start_ts < self.end_ts:
            raise ValueError(f"upgrade start {self.start_ts} must precede end {self.end_ts}")
        if self.end_ts - self.start_ts > max_duration_min:
            raise ValueError(f"upgrade duration {self.end_ts - self.start_ts} min exceeds "
                             f"max {max_duration_min}")
        if self.rue_factor <= 0:
            raise ValueError(f"rue_factor must be positive, got {self.rue_factor}")

    @property
    def change_rate(self) -> float:
        return self.rue_factor - 1.0


@dataclass(frozen=True)
class ChangeRateSpec:
    """Mixture for sampling per-upgrade usage change rates.

    A `small_fraction` of upgrades draw |rate| from `small_abs`, the rest from
    `substantial_abs`; the sign is positive with `positive_fraction`.  When
    `abs_range` is set it overrides both magnitude buckets (used by scoring
    corpora that need all changes above or below a cutoff).
    """

    small_fraction: float = 0.36
    small_abs: tuple[float, float] = (0.005, 0.05)
    substantial_abs: tuple[float, float] = (0.05, 0.55)
    positive_fraction: float = 0.57
    abs_range: tuple[float, float] | None = None

    def validate(self) -> None:
        lo, hi = CHANGE_RATE_ENVELOPE
        ranges = [self.small_abs, self.substantial_abs]
        if self.abs_range is not None:
            ranges = [self.abs_range]
        for r in ranges:
            if not (0 <= r[0] <= r[1]):
                raise ValueError(f"bad magnitude range {r}")
            if -r[1] < lo or r[1] > hi:
                raise ValueError(f"change-rate range {r} escapes envelope {CHANGE_RATE_ENVELOPE}")

    def sample(self, rng: np.random.Generator) -> float:
        if self.abs_range is not None:
            mag = rng.uniform(*self.abs_range)
        elif rng.uniform() < self.small_fraction:
            mag = rng.uniform(*self.small_abs)
        else:
            mag = rng.uniform(*self.substantial_abs)
        sign = 1.0 if rng.uniform() < self.positive_fraction else -1.0
        rate = sign * mag
        return float(min(max(rate, CHANGE_RATE_ENVELOPE[0]), CHANGE_RATE_ENVELOPE[1]))


@dataclass(frozen=True)
class UpgradeSampling:
    """Interval/duration/change-rate distributions for injected upgrades."""

    interval_days: tuple[float, float] = (2.0, 20.0)
    duration_hours: tuple[float, float] = (1.0, 8.0)
    change_rate: ChangeRateSpec = field(default_factory=ChangeRateSpec)
    # No upgrade starts inside the final margin, so every injected upgrade
    # leaves the detector enough trailing windows to confirm it.
    tail_margin_min: int = 3 * MINUTES_PER_DAY

    def validate(self, max_duration_min: int) -> None:
        if self.interval_days[0] <= 0 or self.interval_days[0] > self.interval_days[1]:
            raise ValueError(f"bad interval_days {self.interval_days}")
        if self.duration_hours[0] <= 0 or self.duration_hours[0] > self.duration_hours[1]:
            raise ValueError(f"bad duration_hours {self.duration_hours}")
        if self.duration_hours[1] * 60 > max_duration_min:
            raise ValueError(f"duration_hours {self.duration_hours} exceeds max "
                             f"upgrade duration {max_duration_min} min")
        self.change_rate.validate()


@dataclass(frozen=True)
class ServiceGenSpec:
    service_id: str
    base_total_rps: float
    daily_amplitude: float
    noise_cv: float
    base_rue: float                      # mCore-seconds per request on standard machines
    containers_per_type: dict[str, int]
    usage_noise_cv: float = 0.01
    phase: float | None = None           # derived from the seed when None
    true_red: dict[str, float] | None = None

    def validate(self) -> None:
        if self.base_total_rps <= 0 or self.base_rue <= 0:
            raise ValueError(f"{self.service_id}: base workload and RUE must be positive")
        if not 0 <= self.daily_amplitude < 1:
            raise ValueError(f"{self.service_id}: daily_amplitude must be in [0,1)")
        if self.noise_cv < 0 or self.usage_noise_cv < 0:
            raise ValueError(f"{self.service_id}: noise CV must be non-negative")
        if not self.containers_per_type or min(self.containers_per_type.values()) < 0 \
                or sum(self.containers_per_type.values()) <= 0:
            raise ValueError(f"{self.service_id}: need a positive container count")


@dataclass(frozen=True)
class GenSpec:
    seed: int
    days: int
    services: tuple[ServiceGenSpec, ...]
    fleet: MachineFleet
    true_red: dict[str, float]
    upgrades: tuple[UpgradeEvent, ...] | UpgradeSampling = field(
        default_factory=UpgradeSampling)
    max_upgrade_duration_min: int = 480

    def validate(self) -> None:
        std = self.fleet.standard_type
        if self.true_red.get(std) != 1.0:
            raise ValueError(f"true_red[{std!r}] must be exactly 1.0")
        for t, v in self.true_red.items():
            if v <= 0:
                raise ValueError(f"true_red[{t!r}] must be positive")
        if self.days <= 0:
            raise ValueError("days must be positive")
        ids = [s.service_id for s in self.services]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate service_id in spec")
        for svc in self.services:
            svc.validate()
            for t in svc.containers_per_type:
                if t not in self.fleet.machine_types:
                    raise ValueError(f"{svc.service_id}: unknown machine type {t!r}")
            red = self.service_red(svc)
            if red.get(std) != 1.0:
                raise ValueError(f"{svc.service_id}: true_red[{std!r}] must be 1.0")
        if isinstance(self.upgrades, UpgradeSampling):
            self.upgrades.validate(self.max_upgrade_duration_min)
        else:
            for ev in self.upgrades:
                ev.validate(self.max_upgrade_duration_min)
                if ev.service_id not in ids:
                    raise ValueError(f"upgrade references unknown service {ev.service_id!r}")

    def service_red(self, svc: ServiceGenSpec) -> dict[str, float]:
        return dict(svc.true_red) if svc.true_red is not None else dict(self.true_red)


def _lognormal_factor(rng: np.random.Generator, cv: float, size: int) -> np.ndarray:
    """Multiplicative noise with mean 1 and std `cv`, log-clipped at 4 sigma."""
    if cv == 0:
        return np.ones(size)
    sigma2 = math.log1p(cv * cv)
    sigma = math.sqrt(sigma2)
    z = np.clip(rng.standard_normal(size), -4.0, 4.0)
    return np.exp(-0.5 * sigma2 + sigma * z)


def _sample_upgrades(svc: ServiceGenSpec, sampling: UpgradeSampling,
                     n_minutes: int, seed: int) -> list[UpgradeEvent]:
    rng = rng_for(seed, "upgrades", svc.service_id)
    events: list[UpgradeEvent] = []
    limit = n_minutes - sampling.tail_margin_min
    t = 0.0
    while True:
        t += rng.uniform(*sampling.interval_days) * MINUTES_PER_DAY
        start = int(round(t))
        if start >= limit:
            break
        duration = int(round(rng.uniform(*sampling.duration_hours) * 60))
        duration = max(1, min(duration, n_minutes - 1 - start))
        rate = sampling.change_rate.sample(rng)
        events.append(UpgradeEvent(svc.service_id, start, start + duration, 1.0 + rate))
    return events


def rue_timeline(base_rue: float, upgrades: list[UpgradeEvent], n_minutes: int) -> np.ndarray:
    """Standard-type RUE per minute: base value rescaled by each upgrade,
    ramped linearly across the upgrade's [start, end) span."""
    factor = np.ones(n_minutes)
    t = np.arange(n_minutes)
    for ev in upgrades:
        ramp = np.clip((t - ev.start_ts) / (ev.end_ts - ev.start_ts), 0.0, 1.0)
        factor *= 1.0 + (ev.rue_factor - 1.0) * ramp
    return base_rue * factor


def _generate_service(svc: ServiceGenSpec, spec: GenSpec,
                      upgrades: list[UpgradeEvent]) -> ServiceTrace:
    n_minutes = spec.days * MINUTES_PER_DAY
    red = spec.service_red(svc)
    phase = svc.phase
    if phase is None:
        phase = float(rng_for(spec.seed, "phase", svc.service_id).uniform(0, 2 * math.pi))
    noise = _lognormal_factor(rng_for(spec.seed, "workload", svc.service_id),
                              svc.noise_cv, n_minutes)
    t = np.arange(n_minutes)
    x_total = svc.base_total_rps * (
        1.0 + svc.daily_amplitude * np.sin(2 * math.pi * t / MINUTES_PER_DAY + phase)
    ) * noise

    n_total = sum(svc.containers_per_type.values())
    rps_per_container = x_total / n_total
    rue_std = rue_timeline(svc.base_rue, upgrades, n_minutes)

    trace = ServiceTrace(service_id=svc.service_id, ts0=0, n_minutes=n_minutes)
    for mtype in sorted(svc.containers_per_type):
        count = svc.containers_per_type[mtype]
        if count == 0:
            continue
        eta = _lognormal_factor(rng_for(spec.seed, "usage", svc.service_id, mtype),
                                svc.usage_noise_cv, n_minutes)
        usage = rue_std * red[mtype] * rps_per_container * eta
        trace.types[mtype] = TypeSeries(
            containers=np.full(n_minutes, count, dtype=np.int64),
            rps=rps_per_container.copy(),
            usage=usage,
            present=np.ones(n_minutes, dtype=bool),
        )
    return trace


def generate(spec: GenSpec):
    """Generate (traces, upgrade events, per-service true RED map).

    Pure function of the spec: identical seeds give byte-identical outputs.
    Per-service streams are derived independently, so services may be
    generated in any order (or in parallel) without changing results.
    """
    spec.validate()
    n_minutes = spec.days * MINUTES_PER_DAY
    traces: dict[str, ServiceTrace] = {}
    all_upgrades: list[UpgradeEvent] = []
    red_map: dict[str, dict[str, float]] = {}
    for svc in spec.services:
        if isinstance(spec.upgrades, UpgradeSampling):
            ups = _sample_upgrades(svc, spec.upgrades, n_minutes, spec.seed)
        else:
            ups = [ev for ev in spec.upgrades if ev.service_id == svc.service_id]
        traces[svc.service_id] = _generate_service(svc, spec, ups)
        all_upgrades.extend(ups)
        red_map[svc.service_id] = {
            t: spec.service_red(svc)[t] for t in sorted(svc.containers_per_type)
        }
    all_upgrades.sort(key=lambda ev: (ev.service_id, ev.start_ts))
    return traces, all_upgrades, red_map


def write_upgrades(upgrades: list[UpgradeEvent], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(UPGRADES_COLUMNS)
        for ev in upgrades:
            writer.writerow([ev.service_id, ev.start_ts, ev.end_ts, repr(ev.rue_factor)])


def load_upgrades(path: str | Path) -> list[UpgradeEvent]:
    events = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != UPGRADES_COLUMNS:
            raise ValueError(f"bad upgrades header {header!r}")
        for row in reader:
            events.append(UpgradeEvent(row[0], int(row[1]), int(row[2]), float(row[3])))
    return events


def write_true_red(red_map: dict[str, dict[str, float]], path: str | Path) -> None:
    Path(path).write_text(json.dumps(red_map, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def load_true_red(path: str | Path) -> dict[str, dict[str, float]]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
