import numpy as np
import pytest

from humas_lab.synth import (ChangeRateSpec, GenSpec, ServiceGenSpec,
                             UpgradeEvent, UpgradeSampling, generate,
                             load_upgrades, rue_timeline, write_upgrades,
                             CHANGE_RATE_ENVELOPE)
from humas_lab.trace import write_trace
from humas_lab.seeding import rng_for


def make_spec(fleet, **kw):
    base = dict(
        seed=5, days=3,
        services=(ServiceGenSpec("svc", base_total_rps=6000, daily_amplitude=0.0,
                                 noise_cv=0.0, base_rue=4.0,
                                 containers_per_type={"m-std": 12, "m-alt": 4},
                                 usage_noise_cv=0.0),),
        fleet=fleet, true_red={"m-std": 1.0, "m-alt": 1.2}, upgrades=())
    base.update(kw)
    return GenSpec(**base)


def test_noise_free_construction(two_type_fleet):
    traces, _, red_map = generate(make_spec(two_type_fleet))
    tr = traces["svc"]
    std, alt = tr.types["m-std"], tr.types["m-alt"]
    assert np.allclose(tr.types["m-std"].rps, 6000 / 16)
    # X constant, usage ratio across types equals true RED exactly at every t
    ratio = alt.usage / std.usage
    assert np.allclose(ratio, 1.2, rtol=1e-9)
    assert red_map["svc"]["m-alt"] == 1.2


def test_equal_load_balancing_across_types(two_type_fleet):
    spec = make_spec(two_type_fleet)
    spec = GenSpec(seed=5, days=3, services=(ServiceGenSpec(
        "svc", 6000, 0.3, 0.05, 4.0, {"m-std": 12, "m-alt": 4}),),
        fleet=two_type_fleet, true_red={"m-std": 1.0, "m-alt": 1.2}, upgrades=())
    traces, _, _ = generate(spec)
    tr = traces["svc"]
    assert np.array_equal(tr.types["m-std"].rps, tr.types["m-alt"].rps)


def test_upgrade_ramp_ratio(two_type_fleet):
    up = UpgradeEvent("svc", start_ts=1440, end_ts=1680, rue_factor=1.2)
    traces, ups, _ = generate(make_spec(two_type_fleet, upgrades=(up,)))
    usage = traces["svc"].types["m-std"].usage
    pre = usage[:1440].mean()
    post = usage[1680:].mean()
    assert post / pre == pytest.approx(1.2, abs=1e-9)
    # ramp is linear: halfway through, factor is halfway
    mid = usage[1560] / usage[100]
    assert mid == pytest.approx(1.1, abs=1e-6)


def test_rue_timeline_composes_multiplicatively():
    ups = [UpgradeEvent("s", 100, 160, 1.5), UpgradeEvent("s", 300, 360, 0.8)]
    tl = rue_timeline(2.0, ups, 500)
    assert tl[0] == 2.0
    assert tl[200] == pytest.approx(3.0, rel=1e-12)
    assert tl[450] == pytest.approx(3.0 * 0.8, rel=1e-12)


def test_seeded_determinism_identical_bytes(two_type_fleet, tmp_path):
    spec = GenSpec(seed=7, days=2, services=(ServiceGenSpec(
        "svc", 6000, 0.3, 0.05, 4.0, {"m-std": 12, "m-alt": 4}),),
        fleet=two_type_fleet, true_red={"m-std": 1.0, "m-alt": 1.2},
        upgrades=UpgradeSampling(interval_days=(0.5, 1.0)))
    for name in ("one.csv", "two.csv"):
        traces, ups, _ = generate(spec)
        write_trace(traces, tmp_path / name)
        write_upgrades(ups, tmp_path / ("u_" + name))
    assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()
    assert (tmp_path / "u_one.csv").read_bytes() == (tmp_path / "u_two.csv").read_bytes()


def test_sampled_upgrades_respect_envelope_and_substantial_share(two_type_fleet):
    spec = GenSpec(seed=13, days=400, services=(ServiceGenSpec(
        "svc", 6000, 0.0, 0.0, 4.0, {"m-std": 12, "m-alt": 4}),),
        fleet=two_type_fleet, true_red={"m-std": 1.0, "m-alt": 1.2},
        upgrades=UpgradeSampling(interval_days=(2.0, 4.0)))
    _, ups, _ = generate(spec)
    assert len(ups) > 80
    rates = np.array([u.change_rate for u in ups])
    lo, hi = CHANGE_RATE_ENVELOPE
    assert rates.min() >= lo and rates.max() <= hi
    substantial = np.mean(np.abs(rates) > 0.05)
    assert substantial >= 0.60
    # sign split leans positive, mirroring the observed upgrade mix
    assert 0.4 < np.mean(rates > 0) < 0.75
    # durations bounded by the configured maximum
    assert max(u.end_ts - u.start_ts for u in ups) <= 480


def test_upgrade_sampling_tail_margin(two_type_fleet):
    spec = GenSpec(seed=3, days=10, services=(ServiceGenSpec(
        "svc", 6000, 0.0, 0.0, 4.0, {"m-std": 12, "m-alt": 4}),),
        fleet=two_type_fleet, true_red={"m-std": 1.0, "m-alt": 1.2},
        upgrades=UpgradeSampling(interval_days=(0.5, 0.7)))
    _, ups, _ = generate(spec)
    limit = 10 * 1440 - UpgradeSampling().tail_margin_min
    assert all(u.start_ts < limit for u in ups)


def test_change_rate_envelope_validation():
    with pytest.raises(ValueError, match="envelope"):
        ChangeRateSpec(abs_range=(0.5, 1.2)).validate()
    ChangeRateSpec(abs_range=(0.10, 0.5)).validate()


def test_upgrades_roundtrip(tmp_path):
    ups = [UpgradeEvent("a", 10, 70, 1.25), UpgradeEvent("b", 400, 460, 0.85)]
    write_upgrades(ups, tmp_path / "u.csv")
    assert load_upgrades(tmp_path / "u.csv") == ups


def test_spec_validation_errors(two_type_fleet):
    with pytest.raises(ValueError, match="true_red"):
        generate(make_spec(two_type_fleet, true_red={"m-std": 1.1, "m-alt": 1.2}))
    with pytest.raises(ValueError, match="daily_amplitude"):
        GenSpec(seed=1, days=1, services=(ServiceGenSpec(
            "svc", 100, 1.0, 0.0, 4.0, {"m-std": 1}),),
            fleet=two_type_fleet, true_red={"m-std": 1.0},
            upgrades=()).validate()


def test_per_service_red_override(two_type_fleet):
    svc = ServiceGenSpec("svc", 6000, 0.0, 0.0, 4.0, {"m-std": 12, "m-alt": 4},
                         usage_noise_cv=0.0, true_red={"m-std": 1.0, "m-alt": 0.9})
    spec = make_spec(two_type_fleet, services=(svc,))
    traces, _, red_map = generate(spec)
    ratio = traces["svc"].types["m-alt"].usage / traces["svc"].types["m-std"].usage
    assert np.allclose(ratio, 0.9, rtol=1e-9)
    assert red_map["svc"]["m-alt"] == 0.9
