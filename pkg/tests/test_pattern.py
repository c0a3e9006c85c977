import numpy as np
import pytest

from humas_lab.pattern import (InsufficientDataError, PatternConfig,
                               PiecewisePattern, Segment, dump_model, fit,
                               load_model_json, predict, predict_many,
                               training_sse, write_model_json)


def test_noiseless_line_single_segment(rng):
    x = rng.uniform(100, 2000, size=400)
    pairs = np.column_stack([x, 2.0 * x + 100.0])
    model = fit(pairs)
    assert model.n_segments == 1
    assert model.segments[0].alpha == pytest.approx(2.0, abs=1e-6)
    assert model.segments[0].beta == pytest.approx(100.0, abs=1e-3)


def test_two_regime_recovery(rng):
    n = 3000
    x = rng.uniform(200, 1800, size=n)
    y = np.where(x < 1000, 3.0 * x, 5.0 * x - 2000.0)
    y *= 1.0 + 0.01 * rng.standard_normal(n)
    model = fit(np.column_stack([x, y]))
    assert model.n_segments >= 2
    # recovered split within 10% of the true breakpoint
    interior = model.splits[1:-1]
    best = min(interior, key=lambda s: abs(s - 1000.0))
    assert abs(best - 1000.0) <= 100.0
    # slopes within 5% at segment midpoints away from the break
    for x_probe, slope in ((500.0, 3.0), (1500.0, 5.0)):
        eps = 1.0
        grad = (predict(model, x_probe + eps) - predict(model, x_probe - eps)) / (2 * eps)
        assert grad == pytest.approx(slope, rel=0.05)


def test_fitted_sse_never_worse_than_global_line(rng):
    for trial in range(5):
        n = 500
        x = rng.uniform(0, 100, size=n)
        y = np.sin(x / 15.0) * 50 + 2 * x + rng.standard_normal(n) * 3
        pairs = np.column_stack([x, y])
        model = fit(pairs)
        single = fit(pairs, PatternConfig(max_segments=1))
        assert training_sse(model, pairs) <= training_sse(single, pairs) + 1e-9


def test_min_leaf_and_improvement_gate(rng):
    x = rng.uniform(0, 10, size=70)
    pairs = np.column_stack([x, 5.0 * x + rng.standard_normal(70) * 0.01])
    model = fit(pairs, PatternConfig(min_leaf=32))
    # 70 points, min_leaf 32: at most 2 leaves and only on real improvement
    assert model.n_segments <= 2


def test_insufficient_data_error():
    with pytest.raises(InsufficientDataError):
        fit([(1.0, 2.0)] * 10, PatternConfig(min_leaf=32))


def test_degenerate_x_flat_segment():
    pairs = [(5.0, 10.0)] * 80
    model = fit(pairs)
    assert model.n_segments == 1
    assert model.segments[0].alpha == 0.0
    assert model.segments[0].beta == pytest.approx(10.0)
    assert predict(model, 5.0) == pytest.approx(10.0)


def test_predict_examples():
    model = PiecewisePattern(splits=(0.0, 1000.0),
                             segments=(Segment(2.0, 100.0),),
                             trained_on=(0, 0, 64))
    assert predict(model, 500.0) == 1100.0
    neg = PiecewisePattern(splits=(0.0, 1000.0), segments=(Segment(-1.0, 10.0),),
                           trained_on=(0, 0, 64))
    assert predict(neg, 100.0) == 0.0   # non-negativity floor


def test_interior_split_takes_right_segment():
    model = PiecewisePattern(splits=(0.0, 10.0, 20.0),
                             segments=(Segment(1.0, 0.0), Segment(2.0, 0.0)),
                             trained_on=(0, 0, 64))
    assert predict(model, 10.0) == 20.0   # half-open [0,10), [10,20]
    assert predict(model, 9.999) == pytest.approx(9.999)


def test_extrapolation_uses_boundary_segments():
    model = PiecewisePattern(splits=(10.0, 20.0, 30.0),
                             segments=(Segment(1.0, 0.0), Segment(3.0, -40.0)),
                             trained_on=(0, 0, 64))
    assert predict(model, 5.0) == 5.0          # left segment extended
    assert predict(model, 40.0) == 80.0        # right segment extended


def test_predict_many_matches_scalar(rng):
    x = rng.uniform(0, 3000, size=1000)
    y = np.where(x < 1200, 2.0 * x + 50, 4.0 * x - 2350)
    model = fit(np.column_stack([x, y]))
    xs = rng.uniform(-100, 3500, size=200)
    vec = predict_many(model, xs)
    assert np.allclose(vec, [predict(model, v) for v in xs], rtol=1e-12)
    assert (vec >= 0).all()


def test_refit_bit_reproducible(rng):
    x = rng.uniform(0, 100, size=600)
    y = 3 * x + rng.standard_normal(600)
    pairs = np.column_stack([x, y])
    m1 = fit(pairs, trained_on=(0, 600))
    m2 = fit(pairs, trained_on=(0, 600))
    assert m1 == m2


def test_model_json_roundtrip(tmp_path, rng):
    x = rng.uniform(0, 100, size=200)
    pairs = np.column_stack([x, 2 * x + 5])
    model = fit(pairs, trained_on=(100, 300))
    path = tmp_path / "model.json"
    write_model_json(model, "svc-1", path)
    sid, loaded = load_model_json(path)
    assert sid == "svc-1"
    assert loaded == model
    doc = dump_model(model, "svc-1")
    assert doc["trained_on"] == {"from_ts": 100, "to_ts": 300, "sample_count": 200}
