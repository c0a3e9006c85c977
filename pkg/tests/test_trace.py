import numpy as np
import pytest

from humas_lab.trace import (MachineFleet, FleetEntry, TraceError,
                             aggregate_over_types, aggregate_series, load_trace,
                             write_trace)

HEADER = "ts_minute,service_id,machine_type,containers,rps_per_container,cpu_usage_mcore_per_container\n"


def write_csv(tmp_path, body, name="trace.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body, encoding="utf-8")
    return path


def test_single_service_single_type_ingestion(tmp_path, two_type_fleet):
    path = write_csv(tmp_path,
                     "0,svc,m-std,10,300.0,1200.0\n"
                     "1,svc,m-std,10,310.0,1250.0\n"
                     "2,svc,m-std,10,305.0,1230.0\n")
    traces = load_trace(path, two_type_fleet)
    assert set(traces) == {"svc"}
    tr = traces["svc"]
    assert tr.n_minutes == 3
    series = tr.types["m-std"]
    assert series.present.all()
    assert list(series.containers) == [10, 10, 10]
    assert series.rps[1] == 310.0


def test_unknown_machine_type_names_type_and_line(tmp_path, two_type_fleet):
    path = write_csv(tmp_path,
                     "0,svc,m-std,10,300.0,1200.0\n"
                     "1,svc,999Z,4,300.0,1200.0\n")
    with pytest.raises(TraceError) as err:
        load_trace(path, two_type_fleet)
    assert "999Z" in str(err.value)
    assert "line 3" in str(err.value)


def test_non_monotonic_ts_rejected(tmp_path, two_type_fleet):
    path = write_csv(tmp_path,
                     "5,svc,m-std,10,300.0,1200.0\n"
                     "5,svc,m-std,10,300.0,1200.0\n")
    with pytest.raises(TraceError, match="non-monotonic"):
        load_trace(path, two_type_fleet)


def test_zero_containers_with_metrics_rejected(tmp_path, two_type_fleet):
    path = write_csv(tmp_path, "0,svc,m-std,0,300.0,0.0\n")
    with pytest.raises(TraceError, match="zero containers"):
        load_trace(path, two_type_fleet)


def test_malformed_row_reports_line(tmp_path, two_type_fleet):
    path = write_csv(tmp_path,
                     "0,svc,m-std,10,300.0,1200.0\n"
                     "1,svc,m-std,ten,300.0,1200.0\n")
    with pytest.raises(TraceError, match="line 3"):
        load_trace(path, two_type_fleet)


def test_interleaved_services_split_and_sorted(tmp_path, two_type_fleet):
    # Reference parse: rows grouped by service, already ts-ascending per type.
    rows = [
        (0, "a", "m-std", 5, 100.0, 400.0),
        (0, "b", "m-std", 2, 50.0, 200.0),
        (1, "a", "m-std", 5, 110.0, 410.0),
        (1, "b", "m-std", 2, 55.0, 210.0),
        (2, "a", "m-std", 5, 120.0, 420.0),
    ]
    body = "".join(f"{r[0]},{r[1]},{r[2]},{r[3]},{r[4]},{r[5]}\n" for r in rows)
    traces = load_trace(write_csv(tmp_path, body), two_type_fleet)
    assert set(traces) == {"a", "b"}
    expect_a = [r for r in rows if r[1] == "a"]
    got_ts = list(traces["a"].ts[traces["a"].types["m-std"].present])
    assert got_ts == [r[0] for r in expect_a]
    assert traces["b"].n_minutes == 2
    assert list(traces["b"].types["m-std"].rps) == [50.0, 55.0]


def test_gaps_stay_missing(tmp_path, two_type_fleet):
    path = write_csv(tmp_path,
                     "0,svc,m-std,10,300.0,1200.0\n"
                     "2,svc,m-std,10,305.0,1210.0\n")
    tr = load_trace(path, two_type_fleet)["svc"]
    series = tr.types["m-std"]
    assert list(series.present) == [True, False, True]
    assert np.isnan(series.rps[1])


def test_roundtrip_canonical_file(tmp_path, two_type_fleet):
    body = ("0,a,m-alt,4,100.0,500.5\n"
            "0,a,m-std,6,100.0,420.25\n"
            "1,a,m-alt,4,101.5,505.0\n"
            "1,a,m-std,6,101.5,424.0\n"
            "0,b,m-std,3,80.0,333.125\n")
    path = write_csv(tmp_path, body)
    traces = load_trace(path, two_type_fleet)
    out = tmp_path / "rt.csv"
    write_trace(traces, out)
    assert out.read_text(encoding="utf-8") == HEADER + body


def test_aggregate_single_type_identity(two_type_fleet, tmp_path):
    path = write_csv(tmp_path, "0,svc,m-std,10,300.0,1200.0\n")
    tr = load_trace(path, two_type_fleet)["svc"]
    n, rps, usage = aggregate_over_types(tr, {"m-std": 1.0, "m-alt": 1.0}, 0)
    assert (n, rps, usage) == (10, 300.0, 1200.0)


def test_aggregate_cancels_exact_heterogeneity(tmp_path, two_type_fleet):
    path = write_csv(tmp_path,
                     "0,svc,m-alt,4,300.0,1440.0\n"
                     "0,svc,m-std,6,300.0,1200.0\n")
    tr = load_trace(path, two_type_fleet)["svc"]
    n, rps, usage = aggregate_over_types(tr, {"m-std": 1.0, "m-alt": 1.2}, 0)
    assert n == 10
    assert rps == pytest.approx(300.0, rel=1e-9)
    assert usage == pytest.approx(1200.0, rel=1e-9)


def test_aggregate_three_types_matches_bruteforce():
    # Brute-force weighted mean oracle over a mixed fixture.
    fleet = MachineFleet((FleetEntry("a", 1, 32, True), FleetEntry("b", 1, 32, False),
                          FleetEntry("c", 1, 32, False)))
    counts = {"a": 6, "b": 3, "c": 2}
    rps = {"a": 250.0, "b": 260.0, "c": 240.0}
    usage = {"a": 1000.0, "b": 1300.0, "c": 900.0}
    red = {"a": 1.0, "b": 1.25, "c": 0.9}
    from humas_lab.trace import ServiceTrace, TypeSeries
    tr = ServiceTrace("svc", ts0=0, n_minutes=1)
    for t in counts:
        tr.types[t] = TypeSeries(np.array([counts[t]]), np.array([rps[t]]),
                                 np.array([usage[t]]), np.array([True]))
    n, mean_rps, mean_usage = aggregate_over_types(tr, red, 0)
    n_oracle = sum(counts.values())
    rps_oracle = sum(counts[t] * rps[t] for t in counts) / n_oracle
    usage_oracle = sum(counts[t] * usage[t] / red[t] for t in counts) / n_oracle
    assert n == n_oracle
    assert mean_rps == pytest.approx(rps_oracle, rel=1e-9)
    assert mean_usage == pytest.approx(usage_oracle, rel=1e-9)


def test_aggregate_permutation_invariant_and_red1_plain_mean(rng):
    from humas_lab.trace import ServiceTrace, TypeSeries
    for trial in range(20):
        types = [f"t{i}" for i in range(rng.integers(2, 5))]
        tr = ServiceTrace("svc", ts0=0, n_minutes=1)
        counts, usages = {}, {}
        for t in types:
            counts[t] = int(rng.integers(1, 20))
            usages[t] = float(rng.uniform(100, 2000))
            tr.types[t] = TypeSeries(np.array([counts[t]]), np.array([250.0]),
                                     np.array([usages[t]]), np.array([True]))
        red = {t: 1.0 for t in types}
        n, _, usage = aggregate_over_types(tr, red, 0)
        plain = sum(counts[t] * usages[t] for t in types) / sum(counts.values())
        assert usage == pytest.approx(plain, rel=1e-9)
        # permutation invariance: rebuild with reversed type insertion order
        tr2 = ServiceTrace("svc", ts0=0, n_minutes=1)
        for t in reversed(types):
            tr2.types[t] = tr.types[t]
        assert aggregate_over_types(tr2, red, 0) == (n, 250.0, usage)


def test_aggregate_missing_marker_and_missing_red(tmp_path, two_type_fleet):
    from humas_lab.trace import MissingRedFactor, ServiceTrace, TypeSeries
    tr = ServiceTrace("svc", ts0=0, n_minutes=2)
    tr.types["m-std"] = TypeSeries(np.array([0, 4]), np.array([np.nan, 100.0]),
                                   np.array([np.nan, 400.0]),
                                   np.array([False, True]))
    assert aggregate_over_types(tr, {"m-std": 1.0}, 0) is None
    with pytest.raises(MissingRedFactor):
        aggregate_over_types(tr, {}, 1)


def test_aggregate_series_matches_scalar(tmp_path, two_type_fleet):
    path = write_csv(tmp_path,
                     "0,svc,m-alt,4,300.0,1440.0\n"
                     "0,svc,m-std,6,300.0,1200.0\n"
                     "1,svc,m-std,6,310.0,1250.0\n")
    tr = load_trace(path, two_type_fleet)["svc"]
    red = {"m-std": 1.0, "m-alt": 1.2}
    n, rps, usage, valid = aggregate_series(tr, red)
    for t in range(2):
        got = aggregate_over_types(tr, red, t)
        assert got[0] == n[t]
        assert got[1] == pytest.approx(rps[t], rel=1e-12)
        assert got[2] == pytest.approx(usage[t], rel=1e-12)


def test_fleet_validation():
    with pytest.raises(ValueError, match="standard"):
        MachineFleet((FleetEntry("a", 1, 32, False),))
    with pytest.raises(ValueError, match="duplicate"):
        MachineFleet((FleetEntry("a", 1, 32, True), FleetEntry("a", 2, 64, False)))
