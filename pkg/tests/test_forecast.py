import math

import numpy as np
import pytest

from dsoft.families import get_family
from dsoft.forecast import (BUCKETS, ForecastError, LagSpec, MonthlySeries, build_lag_matrix, crps_original_scale,
                            fit_series, fixture_path, horizon_bucket, inverse_transform, lambda_grid_search,
                            read_series, read_silso, recursive_forecast, seasonal_naive, transform)
from dsoft.gating import StructureError
from dsoft.tree import DistModel, FitConfig, SoftTree, Standardizer, predict


def test_transform_examples():
    assert transform(0.0) == 0.031622776601683793
    assert transform(0.0) == math.sqrt(0.001)
    assert inverse_transform(transform(100.0)) == pytest.approx(100.0, abs=1e-12)
    assert inverse_transform(0.01) == 0.0
    y = np.random.default_rng(0).uniform(0, 400, 1000)
    np.testing.assert_allclose(inverse_transform(transform(y)), y, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        transform([1.0, -0.5])


def test_lag_matrix_layout():
    spec = LagSpec()
    assert len(spec.columns()) == 57 and spec.max_lag == 420
    assert spec.columns()[:2] == ["lag1", "lag2"] and spec.columns()[-1] == "lag420"
    d = build_lag_matrix(np.arange(421.0), spec)
    assert d.n == 1 and d.y[0] == 420.0 and d.X[0, 0] == 419.0 and d.X[0, -1] == 0.0
    small = build_lag_matrix([1.0, 2.0, 3.0], LagSpec((1,), ()))
    np.testing.assert_array_equal(small.X[:, 0], [1.0, 2.0])
    np.testing.assert_array_equal(small.y, [2.0, 3.0])
    with pytest.raises(StructureError, match="421"):
        build_lag_matrix(np.zeros(420), spec)
    with pytest.raises(ValueError):
        LagSpec((12,), (1,)).lags()


def test_lag_matrix_drops_missing_rows():
    s = np.arange(10.0)
    s[4] = np.nan
    d = build_lag_matrix(s, LagSpec((1,), ()))
    assert d.n == 7
    assert not np.any(np.isin(d.extra["t"], [4, 5]))


def const_model(code, etas, spec):
    p = len(spec.lags())
    trees = {k: SoftTree(list(range(p)), beta=np.array([e])) for k, e in enumerate(etas)}
    return DistModel(get_family(code), spec.columns(), Standardizer(np.zeros(p), np.ones(p)), trees, {})


def test_constant_history_fixed_point():
    spec = LagSpec((1, 2), (1,))
    c = 37.0
    m = const_model("NO", [float(transform(c)), math.log(0.1)], spec)
    res = recursive_forecast(m, transform(np.full(30, c)), 10, spec)
    np.testing.assert_allclose(res.point, c, rtol=1e-12)
    assert res.horizon == 10
    q = res.quantiles
    assert np.all(q[0.05] <= q[0.5]) and np.all(q[0.5] <= q[0.95])


def seasonal_ar(n, seed):
    """Seasonal AR(1): y_t = 20 + 0.4 (y_{t-12} - 20) + N(0, 1.5^2), first cycle drawn at the stationary sd."""
    rng = np.random.default_rng(seed)
    sd0 = 1.5 / math.sqrt(1 - 0.4**2)
    y = np.empty(n)
    y[:12] = 20.0 + rng.normal(0.0, sd0, 12)
    for t in range(12, n):
        y[t] = 20.0 + 0.4 * (y[t - 12] - 20.0) + rng.normal(0.0, 1.5)
    return y


def test_horizon_one_equals_single_prediction():
    spec = LagSpec((1, 2), (1,))
    y = seasonal_ar(240, 0)
    m = fit_series(y, "NO", FitConfig(seed=0), spec)
    res = recursive_forecast(m, transform(y), 1, spec)
    x = transform(y)[[-1, -2, -12]][None, :]
    theta = predict(m, x)
    assert res.theta[0][0] == theta[0][0] and res.theta[1][0] == theta[1][0]
    assert res.point[0] == inverse_transform(theta[0][0])


def test_seasonal_ar_beats_seasonal_naive():
    # theory: seasonal-naive MSE 2 (1 - 0.4) var(y) = 3.21, optimal about 2.43; pooled over five series
    spec = LagSpec((1, 2), (1,))
    se, se_naive = [], []
    for seed in range(5):
        y = seasonal_ar(324, seed)
        train, test = y[:300], y[300:]
        m = fit_series(train, "NO", FitConfig(seed=0), spec)
        res = recursive_forecast(m, transform(train), 24, spec)
        assert np.all(res.point >= 0)
        se.append((res.point - test) ** 2)
        se_naive.append((seasonal_naive(train, 24, period=12) - test) ** 2)
    assert np.mean(se) < np.mean(se_naive)


def test_recursive_forecast_errors():
    spec = LagSpec((1,), ())
    m = const_model("NO", [np.nan, 0.0], spec)
    with pytest.raises(ForecastError, match="step 1"):
        recursive_forecast(m, [1.0, 2.0], 3, spec)
    with pytest.raises(ValueError):
        recursive_forecast(const_model("NO", [1.0, 0.0], spec), [1.0], 2, spec, point_rule="mode")


def test_seasonal_naive_and_buckets():
    np.testing.assert_array_equal(seasonal_naive([1, 2, 3], 5, period=3), [1, 2, 3, 1, 2])
    assert [b[1] for b in BUCKETS] == [0, 100, 200]
    assert horizon_bucket(0) == "short" and horizon_bucket(99) == "short"
    assert horizon_bucket(100) == "medium" and horizon_bucket(199) == "medium"
    assert horizon_bucket(200) == "long" and horizon_bucket(5000) == "long"


def test_crps_original_scale_matches_sampling():
    rng = np.random.default_rng(0)
    fam = get_family("GA")
    theta = [8.0, 0.15]
    y = 60.0
    draws = inverse_transform(fam.sample(theta, rng, size=400_000))
    a = draws[: draws.size // 2]
    b = draws[draws.size // 2:]
    mc = np.mean(np.abs(a - y)) - 0.5 * np.mean(np.abs(a - b))
    assert crps_original_scale("GA", y, theta) == pytest.approx(mc, rel=0.01)


def test_grid_search_chronology_and_rows():
    spec = LagSpec((1, 2), (1,))
    y = seasonal_ar(260, 3)
    rows, details = lambda_grid_search(y, "NO", grid=[10.0], eval_windows=[(200, 30)], spec=spec)
    assert len(rows) == 1 and rows[0]["bucket"] == "short" and rows[0]["windows"] == 1
    assert all(d["train_end"] < d["start"] for d in details)
    assert len(details) == 30
    with pytest.raises(ValueError):
        lambda_grid_search(y, "NO", grid=[1.0], eval_windows=[(250, 30)], spec=spec)
    with pytest.raises(ValueError):
        lambda_grid_search(y, "NO", grid=[], eval_windows=[(200, 5)], spec=spec)


def test_grid_search_training_never_sees_future():
    spec = LagSpec((1, 2), (1,))
    y = seasonal_ar(260, 4)
    poisoned = y.copy()
    poisoned[200:] = 1e4
    _, da = lambda_grid_search(y, "NO", grid=[5.0], eval_windows=[(200, 1)], spec=spec)
    _, db = lambda_grid_search(poisoned, "NO", grid=[5.0], eval_windows=[(200, 1)], spec=spec)
    # the forecast is identical, so the squared errors differ only through the actual
    fa = y[200] - math.sqrt(da[0]["se"])
    fb = poisoned[200] - math.sqrt(db[0]["se"])
    fa_alt = y[200] + math.sqrt(da[0]["se"])
    assert min(abs(fa - fb), abs(fa_alt - fb)) < 1e-6


def test_fixture_reads():
    s = read_silso(fixture_path())
    assert isinstance(s, MonthlySeries)
    assert s.label(0) == f"{s.year[0]:04d}-{s.month[0]:02d}"
    i = s.index_of(1999, 3)
    assert s.label(i) == "1999-03"
    assert len(s) > i + 100
    assert np.all(s.values[np.isfinite(s.values)] >= 0)
    again = read_series(fixture_path())
    np.testing.assert_array_equal(again.values, s.values)


def test_comma_csv_column(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("year,month,y\n2000,1,3.5\n2000,2,4.0\n")
    s = read_series(p)
    np.testing.assert_array_equal(s.values, [3.5, 4.0])
    with pytest.raises(KeyError):
        read_series(p, column="ssn")
