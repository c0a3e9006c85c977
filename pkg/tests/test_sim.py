import copy
import math

import numpy as np
import pytest

from humas_lab.drift import LsddConfig, WindowConfig
from humas_lab.plan import CapacityPlan, ServicePolicy
from humas_lab.sim import (ClusterState, LatencyModel, ObservationConfig,
                           SimConfig, SimMode, apply_plan, observe_service,
                           replay_step, run_episode)
from humas_lab.synth import GenSpec, ServiceGenSpec, UpgradeEvent, generate
from humas_lab.trace import FleetEntry, MachineFleet, ServiceTrace, TypeSeries

FAST_WINDOW = WindowConfig(w_hours=8, s_hours=4)
FAST_LSDD = LsddConfig(max_points_per_window=120)


def make_plan(sid, n_target, current, quota_std=4000.0, quotas=None, epoch=0):
    return CapacityPlan(service_id=sid, epoch_ts=epoch, y_max=0.0, r_prime=0.0,
                        n_prime=n_target, delta_n=n_target - current,
                        quotas=quotas or {"m-std": quota_std, "m-alt": quota_std})


def two_machine_fleet():
    return MachineFleet((FleetEntry("m-std", 2, 8, True),))


def test_scale_up_alternates_machines():
    state = ClusterState(two_machine_fleet())
    apply_plan(state, make_plan("svc", 2, 0, quotas={"m-std": 1000.0}))
    assert list(state.counts["svc"]) == [1, 1]


def test_full_scale_down_restores_allocations():
    state = ClusterState(two_machine_fleet())
    apply_plan(state, make_plan("svc", 6, 0, quotas={"m-std": 1000.0}))
    before = state.allocated_mcore.copy()
    assert state.service_total("svc") == 6
    apply_plan(state, make_plan("svc", 0, 6, quotas={"m-std": 1000.0}))
    assert state.service_total("svc") == 0
    assert np.allclose(state.allocated_mcore, 0.0)
    assert not np.allclose(before, 0.0)


def brute_force_place(caps, alloc, counts, quota, n, spread_cap):
    """Reference placement that re-sorts machines after every placement."""
    alloc = alloc.copy()
    counts = counts.copy()
    for _ in range(n):
        order = sorted(range(len(caps)),
                       key=lambda m: (alloc[m] / caps[m], m))
        placed = False
        for m in order:
            if caps[m] - alloc[m] >= quota[m] - 1e-9 and counts[m] < spread_cap:
                alloc[m] += quota[m]
                counts[m] += 1
                placed = True
                break
        if not placed:
            break
    return alloc, counts


def test_placement_matches_bruteforce_oracle(rng):
    for trial in range(10):
        n_machines = int(rng.integers(3, 9))
        entries = [FleetEntry("m-std", n_machines, int(rng.integers(8, 32)), True)]
        fleet = MachineFleet(tuple(entries))
        state = ClusterState(fleet)
        # pre-load with another service to randomize utilization
        state.requota("other", {"m-std": 500.0}, 0)
        state.place("other", int(rng.integers(0, 2 * n_machines)), 10**6, 0)
        quota = float(rng.uniform(500, 3000))
        n = int(rng.integers(1, 12))
        cap_arr = state.capacity_mcore
        alloc0 = state.allocated_mcore.copy()
        counts0 = np.zeros(n_machines, dtype=np.int64)
        spread = max(1, math.ceil(n / n_machines)) + 3
        ref_alloc, ref_counts = brute_force_place(
            cap_arr, alloc0, counts0, np.full(n_machines, quota), n, spread)
        state.requota("svc", {"m-std": quota}, 0)
        state.place("svc", n, spread, 0)
        assert np.allclose(state.allocated_mcore, ref_alloc)
        assert list(state.counts["svc"]) == list(ref_counts)


def test_reclaim_takes_highest_utilization_first():
    fleet = MachineFleet((FleetEntry("m-std", 3, 8, True),))
    state = ClusterState(fleet)
    state.requota("svc", {"m-std": 1000.0}, 0)
    state.counts["svc"][:] = (1, 1, 1)
    state.allocated_mcore[:] = (1000.0, 1000.0, 1000.0)
    # load machine 1 with another service so it has the highest utilization
    state.requota("bg", {"m-std": 3000.0}, 0)
    state.counts["bg"][1] = 1
    state.allocated_mcore[1] += 3000.0
    state.reclaim("svc", 1)
    assert list(state.counts["svc"]) == [1, 0, 1]


def test_conservation_and_capacity_invariant(rng):
    fleet = MachineFleet((FleetEntry("m-std", 4, 16, True),
                          FleetEntry("m-alt", 2, 8, False)))
    state = ClusterState(fleet)
    totals = {}
    for step in range(60):
        sid = f"svc-{int(rng.integers(3))}"
        current = state.service_total(sid)
        target = int(rng.integers(0, 25))
        quotas = {"m-std": 4000.0, "m-alt": float(rng.choice([4000.0, 4800.0]))}
        plan = make_plan(sid, target, current, quotas=quotas, epoch=step)
        shortage_before = sum(s.missing for s in state.shortfalls)
        apply_plan(state, plan)
        shortage = sum(s.missing for s in state.shortfalls) - shortage_before
        assert state.service_total(sid) == target - shortage
        assert (state.allocated_mcore <= state.capacity_mcore + 1e-6).all()
        recomputed = sum(
            (state.counts[s] * np.nan_to_num(state.quotas[s])[state.machine_type_idx]).sum()
            for s in state.counts)
        assert np.isclose(recomputed, state.allocated_mcore.sum())
        totals[sid] = target


def test_requota_eviction_replaces_elsewhere():
    fleet = MachineFleet((FleetEntry("m-std", 2, 4, True),))   # 4000 mCore each
    state = ClusterState(fleet)
    apply_plan(state, make_plan("svc", 2, 0, quotas={"m-std": 2000.0}))
    assert list(state.counts["svc"]) == [1, 1]
    # doubling the quota forces each machine to 4000; still fits
    apply_plan(state, make_plan("svc", 2, 2, quotas={"m-std": 4000.0}))
    assert list(state.counts["svc"]) == [1, 1]
    assert (state.allocated_mcore <= state.capacity_mcore + 1e-9).all()
    # tripling cannot fit 2 containers at all: one is evicted and unplaceable
    apply_plan(state, make_plan("svc", 2, 2, quotas={"m-std": 6000.0}))
    assert state.service_total("svc") < 2 or \
        (state.allocated_mcore <= state.capacity_mcore + 1e-9).all()
    assert (state.allocated_mcore <= state.capacity_mcore + 1e-9).all()


def constant_trace(sid, n_minutes, rps_pc=1.0, usage_pc=400.0, containers=10,
                   types=("m-std",)):
    tr = ServiceTrace(sid, ts0=0, n_minutes=n_minutes)
    for t in types:
        tr.types[t] = TypeSeries(
            np.full(n_minutes, containers, dtype=np.int64),
            np.full(n_minutes, rps_pc), np.full(n_minutes, usage_pc),
            np.ones(n_minutes, dtype=bool))
    return tr


def test_replay_step_utilization_arithmetic():
    fleet = MachineFleet((FleetEntry("m-std", 2, 64, True),))
    trace = constant_trace("svc", 60, rps_pc=1.0, usage_pc=400.0, containers=10)
    ocfg = ObservationConfig(wcfg=FAST_WINDOW, lcfg=FAST_LSDD, global_seed=0,
                             detect=False, normalize=False, standard_type="m-std")
    obs = observe_service(trace, ocfg)
    state = ClusterState(fleet)
    state.requota("svc", {"m-std": 1000.0}, 0)
    state.place("svc", 10, 10, 0)
    util = replay_step(state, obs, {"m-std": 1.0}, 30)
    assert util["m-std"] == pytest.approx(40.0, rel=1e-9)


def test_replay_idle_minute_marked_undefined():
    fleet = MachineFleet((FleetEntry("m-std", 2, 64, True),))
    trace = constant_trace("svc", 60)
    trace.types["m-std"].containers[:] = 0
    trace.types["m-std"].present[:] = False
    ocfg = ObservationConfig(wcfg=FAST_WINDOW, lcfg=FAST_LSDD, global_seed=0,
                             detect=False, normalize=False, standard_type="m-std")
    obs = observe_service(trace, ocfg)
    state = ClusterState(fleet)
    util = replay_step(state, obs, {}, 5)
    assert math.isnan(util["m-std"])


def tight_fleet():
    """Small enough that placement has to use both machine types."""
    return MachineFleet((FleetEntry("m-std", 2, 64, True),
                         FleetEntry("m-alt", 2, 48, False)))


def exact_hetero_spec(fleet, u_star=0.5, days=5, seed=5, upgrades=(), noise=0.0):
    # per-container usage at U*: base chosen so initial containers sit at U*
    n_std, n_alt = 12, 6
    n0 = n_std + n_alt
    base_rue = 4.0
    base_rps = u_star * 4000.0 * n0 / base_rue
    svc = ServiceGenSpec("svc", base_rps, 0.0, noise, base_rue,
                         {"m-std": n_std, "m-alt": n_alt}, usage_noise_cv=0.0)
    return GenSpec(seed=seed, days=days, services=(svc,), fleet=fleet,
                   true_red={"m-std": 1.0, "m-alt": 1.25}, upgrades=upgrades)


def test_static_steady_state_slack_zero_vio_zero():
    # homogeneous fleet, constant workload sized so utilization sits at U*
    fleet = MachineFleet((FleetEntry("m-std", 8, 64, True),))
    n0, base_rue = 10, 4.0
    base_rps = 0.5 * 4000.0 * n0 / base_rue
    svc = ServiceGenSpec("svc", base_rps, 0.0, 0.0, base_rue, {"m-std": n0},
                         usage_noise_cv=0.0)
    spec = GenSpec(seed=1, days=5, services=(svc,), fleet=fleet,
                   true_red={"m-std": 1.0}, upgrades=())
    traces, _, red_map = generate(spec)
    res = run_episode(traces, fleet, {"svc": ServicePolicy(u_star=0.5)},
                      SimMode("static"), wcfg=FAST_WINDOW, lcfg=FAST_LSDD,
                      true_red=red_map,
                      simcfg=SimConfig(eval_start_min=1440, timeseries_stride_min=60))
    m = res.per_service["svc"]
    assert m.slack_pct == pytest.approx(0.0, abs=1e-9)
    assert m.vio_pct == 0.0
    assert m.util_std_total == pytest.approx(0.0, abs=1e-6)


def test_slack_arithmetic_30_over_40():
    fleet = MachineFleet((FleetEntry("m-std", 8, 64, True),))
    n0, base_rue = 10, 4.0
    base_rps = 0.3 * 4000.0 * n0 / base_rue       # utilization 30% at r_std
    svc = ServiceGenSpec("svc", base_rps, 0.0, 0.0, base_rue, {"m-std": n0},
                         usage_noise_cv=0.0)
    spec = GenSpec(seed=1, days=3, services=(svc,), fleet=fleet,
                   true_red={"m-std": 1.0}, upgrades=())
    traces, _, red_map = generate(spec)
    res = run_episode(traces, fleet, {"svc": ServicePolicy(u_star=0.4)},
                      SimMode("static"), wcfg=FAST_WINDOW, lcfg=FAST_LSDD,
                      true_red=red_map,
                      simcfg=SimConfig(eval_start_min=1440, timeseries_stride_min=60))
    assert res.per_service["svc"].slack_pct == pytest.approx(25.0, abs=0.1)


def test_eq9_quota_equalizes_utilization_across_types():
    fleet = tight_fleet()
    traces, _, red_map = generate(exact_hetero_spec(fleet))
    policies = {"svc": ServicePolicy(u_star=0.5)}
    res = run_episode(traces, fleet, policies, SimMode("humas"),
                      wcfg=FAST_WINDOW, lcfg=FAST_LSDD, true_red=red_map,
                      global_seed=3,
                      simcfg=SimConfig(eval_start_min=2 * 1440,
                                       timeseries_stride_min=60,
                                       keep_minutes=True))
    by_type = res.minutes["svc"]["util_by_type"]
    eval_slice = slice(2 * 1440 + 120, None)   # skip the first planned epochs
    gap = np.abs(by_type[0, eval_slice] - by_type[1, eval_slice])
    gap = gap[np.isfinite(gap)]
    assert len(gap) > 1000
    assert gap.max() < 0.5    # percentage points


def test_no_normalize_ratio_equals_red():
    fleet = tight_fleet()
    traces, _, red_map = generate(exact_hetero_spec(fleet))
    policies = {"svc": ServicePolicy(u_star=0.5)}
    res = run_episode(traces, fleet, policies, SimMode("no_normalize"),
                      wcfg=FAST_WINDOW, lcfg=FAST_LSDD, true_red=red_map,
                      global_seed=3,
                      simcfg=SimConfig(eval_start_min=2 * 1440,
                                       timeseries_stride_min=60,
                                       keep_minutes=True))
    names = sorted(traces["svc"].types)       # row order of the minutes arrays
    alt, std = names.index("m-alt"), names.index("m-std")
    by_type = res.minutes["svc"]["util_by_type"]
    eval_slice = slice(2 * 1440 + 120, None)
    ratio = by_type[alt, eval_slice] / by_type[std, eval_slice]
    ratio = ratio[np.isfinite(ratio)]
    assert len(ratio) > 1000
    assert np.allclose(ratio, 1.25, atol=0.01)
    # the absolute gap equals |red - 1| times the standard-type utilization
    gap = by_type[alt, eval_slice] - by_type[std, eval_slice]
    ok = np.isfinite(gap)
    expected = (1.25 - 1.0) * by_type[std, eval_slice][ok]
    assert np.all(np.abs(gap[ok] - expected) < 1.0)


def test_latency_model_monotone_and_sentinel():
    lat = LatencyModel()
    assert lat.rho(0.5) == pytest.approx(75.0)    # 50 * (1 + 0.5*0.5/0.5)
    us = np.linspace(0.0, 0.99, 50)
    vals = lat.rho(us)
    assert (np.diff(vals) > 0).all()
    assert lat.rho(1.0) == 1e6
    with pytest.raises(ValueError, match="nondecreasing"):
        LatencyModel(mode="table", util_edges=(0.0, 0.5),
                     table_ms=((10.0, 5.0),))
    tab = LatencyModel(mode="table", util_edges=(0.0, 0.5, 0.9),
                       table_ms=((10.0, 20.0, 80.0),))
    assert tab.rho(0.6) == 20.0


def test_vio_nonincreasing_with_capacity():
    """More capacity, all else equal, never increases the violation rate."""
    fleet = tight_fleet()
    vio = {}
    for factor in (1.0, 1.3):
        spec = exact_hetero_spec(fleet, u_star=0.5)
        svc = spec.services[0]
        scaled = ServiceGenSpec(svc.service_id, svc.base_total_rps,
                                0.0, 0.0, svc.base_rue,
                                {t: int(round(c * factor))
                                 for t, c in svc.containers_per_type.items()},
                                usage_noise_cv=0.0)
        spec = GenSpec(seed=5, days=3, services=(scaled,), fleet=spec.fleet,
                       true_red=spec.true_red, upgrades=())
        traces, _, red_map = generate(spec)
        res = run_episode(traces, fleet,
                          {"svc": ServicePolicy(u_star=0.45)},
                          SimMode("static"), wcfg=FAST_WINDOW, lcfg=FAST_LSDD,
                          true_red=red_map,
                          simcfg=SimConfig(eval_start_min=1440,
                                           timeseries_stride_min=60))
        vio[factor] = res.per_service["svc"].vio_pct
    assert vio[1.3] <= vio[1.0]


def test_episode_determinism():
    fleet = tight_fleet()
    spec = exact_hetero_spec(fleet, days=4, noise=0.03,
                             upgrades=(UpgradeEvent("svc", 2 * 1440, 2 * 1440 + 120, 1.2),))
    traces, _, red_map = generate(spec)
    policies = {"svc": ServicePolicy(u_star=0.5)}

    def run():
        return run_episode(traces, fleet, policies, SimMode("humas"),
                           wcfg=FAST_WINDOW, lcfg=FAST_LSDD, true_red=red_map,
                           global_seed=11,
                           simcfg=SimConfig(eval_start_min=1440,
                                            timeseries_stride_min=30))
    r1, r2 = run(), run()
    assert r1.weighted == r2.weighted
    assert r1.timeseries_rows == r2.timeseries_rows
    assert [p.n_prime for p in r1.plans] == [p.n_prime for p in r2.plans]


def test_mode_parsing():
    assert SimMode.parse("fixed_relearn(8)") == SimMode("fixed_relearn", 8.0)
    assert SimMode.parse("fixed_relearn_2") == SimMode("fixed_relearn", 2.0)
    assert SimMode.parse("humas").kind == "humas"
    assert SimMode.parse("static").label == "static"
    assert SimMode.parse("fixed_relearn(8)").label == "fixed_relearn_8"
    with pytest.raises(ValueError):
        SimMode.parse("bogus")
