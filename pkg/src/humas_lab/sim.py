"""Trace replay against planner decisions over a heterogeneous fleet.

Ground-truth per-container usage at each minute is reconstructed from the
trace (usage per request times the equal-balanced per-container workload) and
confronted with whatever capacity the policy under test provisioned.  The
episode scores resource slack, utilization stability (total and per machine
type), and QoS violations from a tail-latency model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .drift import (DetectionResult, DriftEvent, DriftState, LsddConfig,
                    WindowConfig, detect_step, window_count, window_points,
                    window_span)
from .forecast import ForecastRequest, forecast_max
from .normalize import (DEFAULT_MIN_SAMPLES, DEFAULT_RPS_FLOOR, RED_CLAMP,
                        RedEntry, RedTable, TotalsSeries)
from .pattern import PatternConfig, PiecewisePattern, fit, predict
from .plan import CapacityPlan, ServicePolicy, build_plan
from .seeding import derive_seed
from .trace import MachineFleet, ServiceTrace, trace_minutes

log = logging.getLogger(__name__)

LATENCY_SENTINEL_MS = 1e6
MINUTES_PER_DAY = 1440
EPOCH_STEP_MIN = 60


# ---------------------------------------------------------------------------
# Latency model


@dataclass(frozen=True)
class LatencyModel:
    """p95 tail latency as a function of container utilization.

    The synthetic default rho(u) = rho0 * (1 + kappa * u / (1 - u)) grows
    without bound as utilization saturates; a table mode accepts an external
    (RPS bin, utilization bin) -> latency lookup instead.
    """

    mode: str = "synthetic"
    rho0_ms: float = 50.0
    kappa: float = 0.5
    util_edges: tuple[float, ...] = ()
    rps_edges: tuple[float, ...] = ()
    table_ms: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if self.mode not in ("synthetic", "table"):
            raise ValueError(f"unknown latency mode {self.mode!r}")
        if self.mode == "table":
            if not self.table_ms or not self.util_edges:
                raise ValueError("table mode needs util_edges and table_ms")
            for row in self.table_ms:
                if any(b < a for a, b in zip(row, row[1:])):
                    raise ValueError("latency must be nondecreasing in utilization")

    def rho(self, util_frac, rps=None):
        """Latency in ms; `util_frac` is utilization as a fraction."""
        u = np.asarray(util_frac, dtype=np.float64)
        if self.mode == "synthetic":
            with np.errstate(divide="ignore", invalid="ignore"):
                val = self.rho0_ms * (1.0 + self.kappa * u / (1.0 - u))
            val = np.where((u < 1.0) & np.isfinite(u), val, LATENCY_SENTINEL_MS)
            val = np.where(np.isnan(u), np.nan, val)
            return float(val) if np.isscalar(util_frac) else val
        ui = np.clip(np.searchsorted(self.util_edges, u, side="right") - 1,
                     0, len(self.table_ms[0]) - 1)
        if rps is None or not self.rps_edges:
            ri = np.zeros_like(ui)
        else:
            ri = np.clip(np.searchsorted(self.rps_edges, np.asarray(rps), side="right") - 1,
                         0, len(self.table_ms) - 1)
        tab = np.asarray(self.table_ms)
        val = tab[ri, ui]
        return float(val) if np.isscalar(util_frac) else val


# ---------------------------------------------------------------------------
# Cluster state and placement


@dataclass
class Shortfall:
    epoch_ts: int
    service_id: str
    missing: int


class ClusterState:
    """Machines with allocations and per-service container placement.

    Containers of one service on one machine type share the service's current
    quota for that type; machine allocations never exceed core capacity.
    """

    def __init__(self, fleet: MachineFleet):
        self.fleet = fleet
        self.type_names = list(fleet.machine_types)
        type_idx = []
        caps = []
        for ti, entry in enumerate(fleet.entries):
            for _ in range(entry.machine_count):
                type_idx.append(ti)
                caps.append(entry.cores_per_machine * 1000.0)
        self.machine_type_idx = np.array(type_idx, dtype=np.int64)
        self.capacity_mcore = np.array(caps, dtype=np.float64)
        self.allocated_mcore = np.zeros(len(caps))
        self.n_machines = len(caps)
        self.counts: dict[str, np.ndarray] = {}
        self.quotas: dict[str, np.ndarray] = {}
        self.shortfalls: list[Shortfall] = []

    def _ensure(self, service_id: str) -> None:
        if service_id not in self.counts:
            self.counts[service_id] = np.zeros(self.n_machines, dtype=np.int64)
            self.quotas[service_id] = np.full(len(self.type_names), np.nan)

    def service_total(self, service_id: str) -> int:
        if service_id not in self.counts:
            return 0
        return int(self.counts[service_id].sum())

    def per_type_counts(self, service_id: str) -> np.ndarray:
        counts = self.counts.get(service_id)
        if counts is None:
            return np.zeros(len(self.type_names), dtype=np.int64)
        return np.bincount(self.machine_type_idx, weights=counts,
                           minlength=len(self.type_names)).astype(np.int64)

    def requota(self, service_id: str, quotas_by_type: dict[str, float],
                epoch_ts: int) -> int:
        """Switch all of a service's containers to new per-type quotas.

        A machine pushed over capacity evicts that service's containers until
        it fits again; returns the eviction count for the caller to re-place.
        """
        self._ensure(service_id)
        new_q = np.array([quotas_by_type.get(t, np.nan) for t in self.type_names])
        old_q = np.nan_to_num(self.quotas[service_id])
        counts = self.counts[service_id]
        delta = np.where(counts > 0,
                         new_q[self.machine_type_idx] - old_q[self.machine_type_idx],
                         0.0)
        self.allocated_mcore += counts * delta
        self.quotas[service_id] = new_q
        evicted = 0
        for m in np.flatnonzero(self.allocated_mcore > self.capacity_mcore + 1e-9):
            q = new_q[self.machine_type_idx[m]]
            while (counts[m] > 0
                   and self.allocated_mcore[m] > self.capacity_mcore[m] + 1e-9):
                counts[m] -= 1
                self.allocated_mcore[m] -= q
                evicted += 1
        return evicted

    def place(self, service_id: str, n: int, spread_cap: int, epoch_ts: int) -> int:
        """Place n containers one at a time on the lowest-utilization machine
        with room for the machine type's quota; returns the unplaced count."""
        self._ensure(service_id)
        counts = self.counts[service_id]
        q_by_machine = self.quotas[service_id][self.machine_type_idx]
        placed = 0
        for _ in range(n):
            feasible = ((self.capacity_mcore - self.allocated_mcore >= q_by_machine - 1e-9)
                        & (counts < spread_cap) & np.isfinite(q_by_machine))
            if not feasible.any():
                break
            util = np.where(feasible, self.allocated_mcore / self.capacity_mcore, np.inf)
            m = int(np.argmin(util))
            counts[m] += 1
            self.allocated_mcore[m] += q_by_machine[m]
            placed += 1
        missing = n - placed
        if missing:
            self.shortfalls.append(Shortfall(epoch_ts, service_id, missing))
            log.warning("t=%d service %s: capacity shortfall, %d containers unplaced",
                        epoch_ts, service_id, missing)
        return missing

    def reclaim(self, service_id: str, n: int) -> int:
        """Remove n containers, highest-utilization machines first."""
        counts = self.counts.get(service_id)
        if counts is None:
            return n
        q_by_machine = self.quotas[service_id][self.machine_type_idx]
        removed = 0
        for _ in range(n):
            feasible = counts > 0
            if not feasible.any():
                break
            util = np.where(feasible, self.allocated_mcore / self.capacity_mcore, -np.inf)
            m = int(np.argmax(util))
            counts[m] -= 1
            self.allocated_mcore[m] -= q_by_machine[m]
            removed += 1
        return n - removed


def apply_plan(state: ClusterState, plan: CapacityPlan,
               red: RedTable | None = None) -> ClusterState:
    """Reconcile one service's placement with a capacity plan.

    Existing containers adopt the plan's per-type quotas, then the container
    delta is placed on the least utilized machines (or reclaimed from the
    most utilized), one container at a time with ties broken by machine id.
    Mutates and returns the state.
    """
    sid = plan.service_id
    quotas = dict(plan.quotas)
    std_quota = quotas.get(state.fleet.standard_type)
    for mtype in state.type_names:
        if mtype not in quotas:
            factor = red.factor(mtype) if red is not None and mtype in red else 1.0
            quotas[mtype] = factor * (std_quota if std_quota else 0.0)
    evicted = state.requota(sid, quotas, plan.epoch_ts)
    target = max(state.service_total(sid) + evicted + plan.delta_n, 0)
    delta = target - state.service_total(sid)
    spread_cap = max(1, math.ceil(target / state.n_machines))
    if delta > 0:
        state.place(sid, delta, spread_cap, plan.epoch_ts)
    elif delta < 0:
        state.reclaim(sid, -delta)
    return state


# ---------------------------------------------------------------------------
# Per-service observation pipeline (trace-driven, causal)


@dataclass(frozen=True)
class ObservationConfig:
    wcfg: WindowConfig
    lcfg: LsddConfig
    global_seed: int
    detect: bool = True
    normalize: bool = True
    standard_type: str = ""
    epoch_minutes: int = EPOCH_STEP_MIN
    rps_floor: float = DEFAULT_RPS_FLOOR
    min_red_samples: int = DEFAULT_MIN_SAMPLES
    red_window_min: int = 2880


@dataclass
class ServiceObservation:
    """Trace-derived inputs for detection, pattern learning and replay."""

    service_id: str
    x: np.ndarray                 # total workload per minute (NaN when idle)
    y: np.ndarray                 # total (normalized) usage per minute
    valid: np.ndarray
    n_trace: np.ndarray           # total trace containers per minute
    rue_by_type: np.ndarray       # (n_types, T) usage per request, NaN unknown
    type_names: list[str]
    std_idx: int
    red_by_epoch: np.ndarray      # (n_epochs, n_types)
    detection: DetectionResult | None
    epoch_minutes: int

    def red_table_at(self, epoch: int) -> RedTable:
        table = RedTable(service_id=self.service_id,
                         standard_type=self.type_names[self.std_idx])
        epoch = min(max(epoch, 0), len(self.red_by_epoch) - 1)
        for ti, name in enumerate(self.type_names):
            table.entries[name] = RedEntry(float(self.red_by_epoch[epoch, ti]),
                                           0, False, (0, 0))
        return table

    def pairs_between(self, lo: int, hi: int) -> np.ndarray:
        lo = max(0, lo)
        hi = min(len(self.x), hi)
        mask = self.valid[lo:hi] & np.isfinite(self.y[lo:hi])
        return np.column_stack([self.x[lo:hi][mask], self.y[lo:hi][mask]])


def observe_service(trace: ServiceTrace, cfg: ObservationConfig) -> ServiceObservation:
    """Replay one service's metric stream causally.

    Every epoch the RED factors are re-estimated over a trailing window
    (restarted from post-drift data after each confirmed drift) and the
    minute's normalized totals are frozen with the factors then in force; the
    first estimate backfills the bootstrap span so the detector's reference
    window is consistently normalized.  Sliding-window drift detection runs
    on the frozen totals as window ends pass.
    """
    T = trace.n_minutes
    names = sorted(trace.types)
    if cfg.normalize and cfg.standard_type not in names:
        raise KeyError(f"standard type {cfg.standard_type!r} not in trace "
                       f"{trace.service_id}")
    std_idx = names.index(cfg.standard_type) if cfg.standard_type in names else 0
    n_types = len(names)

    counts = np.zeros((n_types, T), dtype=np.int64)
    rps = np.full((n_types, T), np.nan)
    usage = np.full((n_types, T), np.nan)
    for ti, name in enumerate(names):
        s = trace.types[name]
        active = s.present & (s.containers > 0)
        counts[ti] = np.where(active, s.containers, 0)
        rps[ti] = np.where(active, s.rps, np.nan)
        usage[ti] = np.where(active, s.usage, np.nan)

    with np.errstate(invalid="ignore", divide="ignore"):
        rue = np.where(rps >= cfg.rps_floor, usage / rps, np.nan)
        ratio = rue / rue[std_idx]
    ratio_ok = np.isfinite(ratio) & (rue[std_idx] > 0)
    ratio_filled = np.where(ratio_ok, ratio, 0.0)
    csum = np.concatenate([np.zeros((n_types, 1)), np.cumsum(ratio_filled, axis=1)], axis=1)
    ccnt = np.concatenate([np.zeros((n_types, 1), dtype=np.int64),
                           np.cumsum(ratio_ok, axis=1)], axis=1)

    n_t = counts.sum(axis=0)
    valid = n_t > 0
    x = np.where(valid, np.nansum(counts * rps, axis=0), np.nan)
    y = np.full(T, np.nan)

    n_epochs = max(1, -(-T // cfg.epoch_minutes))
    red_by_epoch = np.ones((n_epochs, n_types))
    current_red = np.ones(n_types)
    post_drift_start = 0
    red_initialized = not cfg.normalize

    totals_view = TotalsSeries(service_id=trace.service_id, ts0=trace.ts0,
                               x=x, y=y, n=n_t, valid=valid)
    detection = DetectionResult(service_id=trace.service_id, records=[], drifts=[]) \
        if cfg.detect else None
    state: DriftState | None = None
    next_window = 0
    total_windows = window_count(T, cfg.wcfg) if cfg.detect else 0

    def estimate_window_red(lo: int, hi: int) -> None:
        for ti in range(n_types):
            if ti == std_idx:
                current_red[ti] = 1.0
                continue
            cnt = int(ccnt[ti, hi] - ccnt[ti, lo])
            if cnt < cfg.min_red_samples:
                # Keep the previous factor: a short post-drift window is not
                # evidence the efficiency ratio changed.
                continue
            val = (csum[ti, hi] - csum[ti, lo]) / cnt
            current_red[ti] = min(max(val, RED_CLAMP[0]), RED_CLAMP[1])

    def fill_y(lo: int, hi: int) -> None:
        norm = usage[:, lo:hi] / current_red[:, None]
        y[lo:hi] = np.where(valid[lo:hi],
                            np.nansum(counts[:, lo:hi] * norm, axis=0), np.nan)

    for e in range(n_epochs):
        t0 = e * cfg.epoch_minutes
        t1 = min(T, t0 + cfg.epoch_minutes)
        if cfg.normalize and t0 >= cfg.red_window_min:
            lo = max(post_drift_start, t0 - cfg.red_window_min)
            estimate_window_red(lo, t0)
            if not red_initialized:
                fill_y(0, t0)
                red_initialized = True
        red_by_epoch[e] = current_red
        fill_y(t0, t1)

        if cfg.detect and red_initialized:
            while next_window < total_windows:
                end = window_span(next_window, cfg.wcfg)[1]
                if end > t1:
                    break
                i = next_window
                next_window += 1
                pts = window_points(totals_view, i, cfg.wcfg, cfg.lcfg,
                                    trace.service_id, cfg.global_seed)
                end_ts = int(trace.ts0 + end)
                if pts is None:
                    continue
                if state is None:
                    state = DriftState(reference_index=i, reference_points=pts)
                    continue
                seed = derive_seed(trace.service_id, i, cfg.global_seed)
                decision = detect_step(state, i, pts, cfg.wcfg, cfg.lcfg, seed)
                record = state.history[-1]
                record.window_end_ts = end_ts
                detection.records.append(record)
                if decision.kind == "drift":
                    i_d = decision.drift_index
                    drift_end = int(trace.ts0 + window_span(i_d, cfg.wcfg)[1])
                    detection.drifts.append(DriftEvent(
                        drift_index=i_d, confirm_index=i,
                        drift_end_ts=drift_end, confirm_end_ts=end_ts))
                    post_drift_start = drift_end - trace.ts0

    return ServiceObservation(
        service_id=trace.service_id, x=x, y=y, valid=valid, n_trace=n_t,
        rue_by_type=rue, type_names=names, std_idx=std_idx,
        red_by_epoch=red_by_epoch, detection=detection,
        epoch_minutes=cfg.epoch_minutes)


def replay_step(state: ClusterState, obs: ServiceObservation, true_red: dict[str, float],
                t: int) -> dict[str, float]:
    """Per-type container utilization (%) of one service at one minute.

    Ground-truth per-container usage on type j is the type's usage-per-request
    at t times the equal-balanced per-container workload X_t / n_t, where n_t
    is the simulated container count.  Returns NaN-marked entries when the
    service is idle.
    """
    sid = obs.service_id
    n_sim = state.service_total(sid)
    out: dict[str, float] = {}
    fleet_counts = state.per_type_counts(sid)
    quotas = state.quotas.get(sid)
    if n_sim == 0 or not obs.valid[t] or quotas is None:
        return {name: math.nan for name in obs.type_names}
    fleet_pos = {name: k for k, name in enumerate(state.type_names)}
    x_t = obs.x[t]
    rue_std = obs.rue_by_type[obs.std_idx, t]
    for ti, name in enumerate(obs.type_names):
        fi = fleet_pos[name]
        if fleet_counts[fi] == 0:
            out[name] = math.nan
            continue
        rue_t = obs.rue_by_type[ti, t]
        if not np.isfinite(rue_t):
            rue_t = true_red.get(name, 1.0) * rue_std
        upc = rue_t * x_t / n_sim
        out[name] = upc / quotas[fi] * 100.0
    return out


# ---------------------------------------------------------------------------
# Episode driver


@dataclass(frozen=True)
class SimMode:
    kind: str                      # humas | fixed_relearn | no_normalize | static
    relearn_days: float | None = None

    KINDS = ("humas", "fixed_relearn", "no_normalize", "static")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown mode {self.kind!r}")
        if self.kind == "fixed_relearn" and not self.relearn_days:
            raise ValueError("fixed_relearn needs a positive day count")

    @property
    def label(self) -> str:
        if self.kind == "fixed_relearn":
            days = self.relearn_days
            return f"fixed_relearn_{int(days) if float(days).is_integer() else days}"
        return self.kind

    @staticmethod
    def parse(text: str) -> "SimMode":
        t = text.strip().lower()
        for sep in ("(", "_", ":"):
            if t.startswith("fixed_relearn") and len(t) > len("fixed_relearn") \
                    and t[len("fixed_relearn")] == sep:
                days = t[len("fixed_relearn") + 1:].rstrip(")")
                return SimMode("fixed_relearn", float(days))
        if t == "fixed_relearn":
            return SimMode("fixed_relearn", 8.0)
        return SimMode(t)


@dataclass(frozen=True)
class SimConfig:
    eval_start_min: int = 3 * MINUTES_PER_DAY
    timeseries_stride_min: int = 1
    keep_minutes: bool = False


class _PatternTracker:
    """Holds the current pattern model and applies the mode's refit policy."""

    def __init__(self, obs: ServiceObservation, pcfg: PatternConfig, mode: SimMode,
                 eval_start: int):
        self.obs = obs
        self.pcfg = pcfg
        self.mode = mode
        self.eval_start = eval_start
        self.model: PiecewisePattern | None = None
        self.stale = True
        self.pending_lo: int | None = 0     # data start for the next (re)fit
        self.n_refits = 0
        self.drift_queue = []
        if mode.kind in ("humas", "no_normalize") and obs.detection is not None:
            self.drift_queue = [(d.confirm_end_ts, d.drift_end_ts)
                                for d in obs.detection.drifts]
        self.next_fixed = eval_start

    def _try_fit(self, lo: int, hi: int) -> bool:
        pairs = self.obs.pairs_between(lo, hi)
        if len(pairs) < 2 * self.pcfg.min_leaf:
            return False
        self.model = fit(pairs, self.pcfg, trained_on=(lo, hi))
        self.stale = False
        self.n_refits += 1
        return True

    def advance(self, t0: int) -> PiecewisePattern | None:
        """Bring the model up to date for an epoch starting at t0."""
        if self.mode.kind == "fixed_relearn":
            while t0 >= self.next_fixed:
                span = int(self.mode.relearn_days * MINUTES_PER_DAY)
                self.pending_lo = max(0, self.next_fixed - span)
                self.stale = True
                self.next_fixed += span
        else:
            while self.drift_queue and self.drift_queue[0][0] <= t0:
                _, drift_end = self.drift_queue.pop(0)
                self.pending_lo = drift_end
                self.stale = True
        if self.stale and t0 >= self.eval_start and self.pending_lo is not None:
            if self._try_fit(self.pending_lo, t0):
                self.pending_lo = None
            else:
                log.debug("service %s: keeping stale model, %d..%d too small",
                          self.obs.service_id, self.pending_lo, t0)
        return self.model


@dataclass
class ServiceEpisodeMetrics:
    service_id: str
    mean_util_pct: float
    util_std_total: float
    util_std_per_type: dict[str, float]
    slack_pct: float
    vio_pct: float
    mean_capacity_cores: float
    n_drifts: int
    n_refits: int


@dataclass
class EpisodeResult:
    mode: str
    per_service: dict[str, ServiceEpisodeMetrics]
    weighted: dict[str, object]
    plans: list[CapacityPlan]
    timeseries_rows: list[tuple]
    plots_rows: list[tuple]
    detections: dict[str, DetectionResult]
    shortfalls: list[Shortfall]
    minutes: dict[str, dict[str, np.ndarray]] | None = None


class _Accumulator:
    """Running mean/std/vio accumulators over the evaluation minutes."""

    def __init__(self, type_names: list[str]):
        self.type_names = type_names
        self.total = _MeanVar()
        self.per_type = {t: _MeanVar() for t in type_names}
        self.vio_minutes = 0
        self.minutes = 0
        self.capacity_sum = 0.0

    def add(self, util_total: np.ndarray, util_types: dict[str, np.ndarray],
            vio: np.ndarray, capacity_mcore: float) -> None:
        ok = np.isfinite(util_total)
        self.total.add(util_total[ok])
        for t, series in util_types.items():
            good = np.isfinite(series)
            self.per_type[t].add(series[good])
        self.vio_minutes += int(np.nansum(vio))
        self.minutes += int(np.sum(ok))
        self.capacity_sum += capacity_mcore * len(util_total)


class _MeanVar:
    def __init__(self):
        self.n = 0
        self.s = 0.0
        self.s2 = 0.0

    def add(self, values: np.ndarray) -> None:
        self.n += len(values)
        self.s += float(np.sum(values))
        self.s2 += float(np.sum(values * values))

    @property
    def mean(self) -> float:
        return self.s / self.n if self.n else math.nan

    @property
    def std(self) -> float:
        if self.n < 2:
            return math.nan
        var = max(self.s2 / self.n - self.mean ** 2, 0.0)
        return math.sqrt(var)


def default_policies(services, base: ServicePolicy) -> dict[str, ServicePolicy]:
    return {sid: base for sid in services}


def run_episode(traces: dict[str, ServiceTrace], fleet: MachineFleet,
                policies: dict[str, ServicePolicy], mode: SimMode, *,
                wcfg: WindowConfig, lcfg: LsddConfig,
                pcfg: PatternConfig | None = None,
                forecast_method: str = "seasonal_naive_trend",
                latency: LatencyModel | None = None,
                simcfg: SimConfig | None = None,
                true_red: dict[str, dict[str, float]] | None = None,
                global_seed: int = 0,
                observations: dict[str, ServiceObservation] | None = None,
                observe_fn=None) -> EpisodeResult:
    """Replay one auto-scaling episode over the full trace span.

    Every adjustment epoch the mode's pipeline turns forecasted workload and
    the current pattern model into a capacity plan that is applied to the
    shared cluster; minutes are scored against each service's policy.  The
    epoch chain is sequential; the per-service observation pass is pure
    trace-derived work and may be precomputed (or parallelized) by callers.
    """
    pcfg = pcfg or PatternConfig()
    latency = latency or LatencyModel()
    simcfg = simcfg or SimConfig()
    true_red = true_red or {}
    T = trace_minutes(traces)
    services = sorted(traces)
    eval_start = simcfg.eval_start_min

    if observations is None:
        ocfg = ObservationConfig(
            wcfg=wcfg, lcfg=lcfg, global_seed=global_seed,
            detect=mode.kind in ("humas", "no_normalize"),
            normalize=mode.kind in ("humas", "fixed_relearn"),
            standard_type=fleet.standard_type)
        if observe_fn is not None:
            observations = observe_fn(traces, ocfg)
        else:
            observations = {sid: observe_service(traces[sid], ocfg)
                            for sid in services}

    state = ClusterState(fleet)
    trackers: dict[str, _PatternTracker] = {}
    rho_stars: dict[str, float] = {}
    plans: list[CapacityPlan] = []
    accs: dict[str, _Accumulator] = {}
    ts_rows: list[tuple] = []
    plot_rows: list[tuple] = []
    minutes = {sid: {"util_total": np.full(T, np.nan),
                     "util_by_type": np.full((len(observations[sid].type_names), T), np.nan),
                     "capacity_mcore": np.full(T, np.nan)}
               for sid in services} if simcfg.keep_minutes else None

    # Bootstrap: the trace's initial container count at the standard quota.
    for sid in services:
        obs = observations[sid]
        policy = policies[sid]
        rho_stars[sid] = (policy.rho_star_ms if policy.rho_star_ms is not None
                          else float(latency.rho(policy.u_star)))
        trackers[sid] = _PatternTracker(obs, pcfg, mode, eval_start)
        accs[sid] = _Accumulator(obs.type_names)
        n0 = int(obs.n_trace[0])
        quotas = {t: policy.r_std_mcore for t in state.type_names}
        state.requota(sid, quotas, 0)
        state.place(sid, n0, max(1, math.ceil(n0 / state.n_machines)), 0)

    stride = max(1, simcfg.timeseries_stride_min)
    for t0 in range(0, T, EPOCH_STEP_MIN):
        t1 = min(T, t0 + EPOCH_STEP_MIN)
        epoch = t0 // EPOCH_STEP_MIN
        if mode.kind != "static" and t0 >= eval_start:
            for sid in services:
                obs = observations[sid]
                policy = policies[sid]
                every = max(1, int(round(policy.h_p_hours * 60 / EPOCH_STEP_MIN)))
                if (epoch - eval_start // EPOCH_STEP_MIN) % every != 0:
                    continue
                model = trackers[sid].advance(t0)
                horizon = max(1, int(round(policy.h_p_hours * 60)))
                req = ForecastRequest(history=obs.x[:t0], horizon=horizon,
                                      now_ts=t0 - 1)
                future = obs.x[t0:t0 + horizon] if forecast_method == "oracle" else None
                x_max = forecast_max(req, forecast_method, future=future)
                if model is not None:
                    if x_max < model.splits[0] or x_max > model.splits[-1]:
                        log.debug("service %s t=%d: forecast %.1f outside trained "
                                  "range, extrapolating", sid, t0, x_max)
                    y_max = predict(model, x_max)
                else:
                    recent = obs.y[max(0, t0 - 60):t0]
                    y_max = float(np.nanmax(recent)) if np.isfinite(recent).any() else 0.0
                red_table = obs.red_table_at(epoch) if mode.kind in (
                    "humas", "fixed_relearn") else _unit_red(obs)
                plan = build_plan(sid, t0, y_max, state.service_total(sid),
                                  policy, red_table)
                apply_plan(state, plan, red_table)
                plans.append(plan)

        seg = slice(t0, t1)
        seg_len = t1 - t0
        fleet_pos = {name: k for k, name in enumerate(state.type_names)}
        for sid in services:
            obs = observations[sid]
            n_sim = state.service_total(sid)
            obs_to_fleet = [fleet_pos[name] for name in obs.type_names]
            per_type = state.per_type_counts(sid)[obs_to_fleet]
            quotas = state.quotas[sid][obs_to_fleet]
            cap = float(np.nansum(per_type * np.nan_to_num(quotas)))
            x_seg = obs.x[seg]
            with np.errstate(invalid="ignore", divide="ignore"):
                upc = obs.rue_by_type[:, seg] * (x_seg[None, :] / max(n_sim, 1))
                for ti, name in enumerate(obs.type_names):
                    if per_type[ti] > 0 and not np.all(np.isfinite(obs.rue_by_type[ti, seg])):
                        fb = true_red.get(sid, {}).get(name, 1.0) \
                            * obs.rue_by_type[obs.std_idx, seg] * (x_seg / max(n_sim, 1))
                        upc[ti] = np.where(np.isfinite(upc[ti]), upc[ti], fb)
                util_types = {}
                usage_total = np.zeros(seg_len)
                active_any = np.zeros(seg_len, dtype=bool)
                util_max = np.full(seg_len, np.nan)
                for ti, name in enumerate(obs.type_names):
                    if per_type[ti] == 0 or not np.isfinite(quotas[ti]):
                        util_types[name] = np.full(seg_len, np.nan)
                        continue
                    u = upc[ti] / quotas[ti] * 100.0
                    util_types[name] = u
                    usage_total += np.where(np.isfinite(upc[ti]), per_type[ti] * upc[ti], np.nan)
                    active_any |= np.isfinite(u)
                    util_max = np.fmax(util_max, u)
                util_total = np.where((n_sim > 0) & obs.valid[seg] & (cap > 0),
                                      usage_total / cap * 100.0, np.nan)
                rho = latency.rho(util_max / 100.0, x_seg)
                vio = np.where(np.isfinite(rho), rho > rho_stars[sid], np.nan)
            if minutes is not None:
                minutes[sid]["util_total"][seg] = util_total
                for ti, name in enumerate(obs.type_names):
                    minutes[sid]["util_by_type"][ti, seg] = util_types[name]
                minutes[sid]["capacity_mcore"][seg] = cap
            if t0 >= eval_start:
                accs[sid].add(util_total, util_types, vio, cap)
            for t in range(t0 + (-t0) % stride, t1, stride):
                rel = t - t0
                for ti, name in enumerate(obs.type_names):
                    if per_type[ti] > 0:
                        ts_rows.append((t, sid, name,
                                        float(util_types[name][rel]),
                                        float(per_type[ti] * quotas[ti])))
                plot_rows.append((t, sid, mode.label,
                                  float(util_total[rel]), cap,
                                  float(x_seg[rel]) if np.isfinite(x_seg[rel]) else "",
                                  policies[sid].u_star * 100.0))

    per_service: dict[str, ServiceEpisodeMetrics] = {}
    for sid in services:
        acc = accs[sid]
        policy = policies[sid]
        mean_util = acc.total.mean
        eval_minutes = max(T - eval_start, 1)
        per_service[sid] = ServiceEpisodeMetrics(
            service_id=sid,
            mean_util_pct=mean_util,
            util_std_total=acc.total.std,
            util_std_per_type={t: acc.per_type[t].std for t in acc.type_names
                               if acc.per_type[t].n > 1},
            slack_pct=(1.0 - mean_util / (policy.u_star * 100.0)) * 100.0,
            vio_pct=acc.vio_minutes / eval_minutes * 100.0,
            mean_capacity_cores=acc.capacity_sum / eval_minutes / 1000.0,
            n_drifts=len(observations[sid].detection.drifts)
            if observations[sid].detection else 0,
            n_refits=trackers[sid].n_refits)

    weights = {sid: per_service[sid].mean_capacity_cores for sid in services}
    wsum = sum(weights.values()) or 1.0

    def wavg(get) -> float:
        vals = [(weights[sid], get(per_service[sid])) for sid in services]
        vals = [(w, v) for w, v in vals if v == v]
        if not vals:
            return math.nan
        return sum(w * v for w, v in vals) / (sum(w for w, _ in vals) or 1.0)

    all_types = sorted({t for sid in services for t in per_service[sid].util_std_per_type})
    weighted = {
        "slack_pct": wavg(lambda m: m.slack_pct),
        "util_std_total": wavg(lambda m: m.util_std_total),
        "util_std_per_type": {
            t: wavg(lambda m, t=t: m.util_std_per_type.get(t, math.nan))
            for t in all_types},
        "vio_pct": wavg(lambda m: m.vio_pct),
        "mean_capacity_cores": sum(weights.values()),
    }
    return EpisodeResult(mode=mode.label, per_service=per_service, weighted=weighted,
                         plans=plans, timeseries_rows=ts_rows, plots_rows=plot_rows,
                         detections={sid: observations[sid].detection
                                     for sid in services
                                     if observations[sid].detection is not None},
                         shortfalls=state.shortfalls, minutes=minutes)


def _unit_red(obs: ServiceObservation) -> RedTable:
    table = RedTable(service_id=obs.service_id,
                     standard_type=obs.type_names[obs.std_idx])
    for name in obs.type_names:
        table.entries[name] = RedEntry(1.0, 0, False, (0, 0))
    return table
