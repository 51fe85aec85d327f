"""Lagged designs and recursive multi-step probabilistic forecasts for monthly series."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .families import get_family
from .forest import ForestModel, fit_forest, predict_forest
from .scoring import BREAK_PROBS, crps_quadrature
from .tree import Dataset, FitConfig, StructureError, fit, predict

log = logging.getLogger(__name__)

OFFSET = 0.001
DEFAULT_LAMBDAS = (1.0, 5.0, 10.0, 50.0, 100.0, 500.0, 1000.0)
BUCKETS = (("short", 0, 100), ("medium", 100, 200), ("long", 200, None))
SOLAR_CYCLE_MONTHS = 132


class ForecastError(RuntimeError):
    pass


def transform(y):
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("transform needs non-negative values")
    return np.sqrt(y + OFFSET)


def inverse_transform(yt):
    yt = np.asarray(yt, dtype=float)
    return np.maximum(yt * yt - OFFSET, 0.0)


@dataclass(frozen=True)
class LagSpec:
    monthly_lags: tuple = tuple(range(1, 25))
    annual_lags: tuple = tuple(range(3, 36))

    def lags(self):
        out = [int(m) for m in self.monthly_lags] + [12 * int(j) for j in self.annual_lags]
        if any(v <= 0 for v in out):
            raise ValueError("lags must be positive")
        if len(set(out)) != len(out):
            raise ValueError("lags must be distinct after expansion")
        return out

    @property
    def max_lag(self):
        return max(self.lags())

    def columns(self):
        return [f"lag{v}" for v in self.lags()]


def build_lag_matrix(series, spec=None):
    """One row per time point ``t >= max_lag``: features ``y[t - lag]``, response ``y[t]``."""
    spec = spec or LagSpec()
    series = np.asarray(series, dtype=float)
    lags = spec.lags()
    m = max(lags)
    if series.size <= m:
        raise StructureError(f"series of length {series.size} is too short; need at least {m + 1} values")
    t = np.arange(m, series.size)
    X = np.column_stack([series[t - lag] for lag in lags])
    ok = np.all(np.isfinite(X), axis=1) & np.isfinite(series[t])
    return Dataset(X[ok], series[t][ok], spec.columns(), {"t": t[ok]})


def lag_row(history, spec):
    history = np.asarray(history, dtype=float)
    lags = spec.lags()
    if history.size < max(lags):
        raise StructureError(f"history needs at least {max(lags)} values")
    return np.array([history[-lag] for lag in lags])


def _predict_any(model, X):
    if isinstance(model, ForestModel):
        return predict_forest(model, X)
    return predict(model, X)


@dataclass
class ForecastResult:
    theta: list  # per parameter, transformed scale, one entry per step
    point: np.ndarray  # original scale
    quantiles: dict = field(default_factory=dict)  # level -> original-scale values
    family: object = None

    @property
    def horizon(self):
        return self.point.size


def recursive_forecast(model, history, horizon, spec=None, quantiles=(0.05, 0.5, 0.95), point_rule="mean"):
    """Iterate one-step predictions, feeding the transformed-scale location back as the next lag.

    ``history`` is on the transformed scale (the scale the model was fitted on).
    Quantiles are computed per step and mapped back with ``inverse_transform``.
    """
    spec = spec or LagSpec()
    family = model.family
    hist = list(np.asarray(history, dtype=float))
    thetas = [[] for _ in range(family.n_params)]
    feed = []
    for step in range(int(horizon)):
        x = lag_row(hist, spec)[None, :]
        theta = [float(t[0]) for t in _predict_any(model, x)]
        if point_rule == "mean":
            value = theta[0]
        elif point_rule == "median":
            value = float(family.quantile(0.5, theta))
        else:
            raise ValueError(f"unknown point rule {point_rule!r}")
        if not np.isfinite(value):
            raise ForecastError(f"non-finite feedback value at step {step + 1}")
        for k, t in enumerate(theta):
            thetas[k].append(t)
        feed.append(value)
        hist.append(value)
    thetas = [np.array(t) for t in thetas]
    qs = {}
    for p in sorted(quantiles):
        qs[p] = inverse_transform(family.quantile(p, thetas))
    point = inverse_transform(np.array(feed))
    return ForecastResult(theta=thetas, point=point, quantiles=qs, family=family)


def crps_original_scale(family, y, theta):
    """CRPS on the original scale of the distribution of ``inverse_transform(Y~)``."""
    family = get_family(family)
    theta = [float(t) for t in theta]

    def cdf(t):
        return float(family.cdf(np.sqrt(max(t, 0.0) + OFFSET), theta))

    lo_t, hi_t = family.support_window([np.asarray(t) for t in theta])
    hi = float(inverse_transform(hi_t))
    breaks = inverse_transform(family.quantile(np.array(BREAK_PROBS), theta))
    return crps_quadrature(cdf, float(y), 0.0, max(hi, float(y)), breaks=breaks)


def seasonal_naive(history, horizon, period=SOLAR_CYCLE_MONTHS):
    """Repeat the last ``period`` observations."""
    history = np.asarray(history, dtype=float)
    if history.size < period:
        raise ValueError("history shorter than the seasonal period")
    last = history[-period:]
    return np.array([last[h % period] for h in range(int(horizon))])


def horizon_bucket(h):
    """Bucket of a 0-based forecast step."""
    for name, lo, hi in BUCKETS:
        if h >= lo and (hi is None or h < hi):
            return name
    raise ValueError(h)


def fit_series(series, family, config, spec=None, n_trees=None, bag_fraction=0.63, n_jobs=1):
    """Fit on the transformed original-scale ``series``."""
    data = build_lag_matrix(transform(series), spec)
    if n_trees:
        return fit_forest(data, family, config, n_trees=n_trees, bag_fraction=bag_fraction,
                          seed=config.seed, n_jobs=n_jobs)
    return fit(data, family, config)


def lambda_grid_search(series, family, grid=DEFAULT_LAMBDAS, eval_windows=(), spec=None, config=None,
                       quantiles=(0.05, 0.5, 0.95)):
    """Score recursive forecasts for every shrinkage value and window.

    ``eval_windows`` holds ``(start, horizon)`` pairs of 0-based indices into
    ``series``; the fit for a window only sees ``series[:start]``. Returns
    ``(rows, details)``: one row per (lambda, bucket) with the median over
    windows of the per-window mean CRPS and MSE, plus per-window records.
    """
    spec = spec or LagSpec()
    config = config or FitConfig()
    series = np.asarray(series, dtype=float)
    grid = list(grid)
    if not grid:
        raise ValueError("lambda grid is empty")
    windows = [(int(s), int(h)) for s, h in eval_windows]
    for start, horizon in windows:
        if start <= spec.max_lag + 1 or horizon < 1 or start + horizon > series.size:
            raise ValueError(f"window (start={start}, horizon={horizon}) is not chronologically valid")
    family = get_family(family)
    details = []
    for lam in grid:
        cfg = config.with_lambda(lam)
        for start, horizon in windows:
            train = series[:start]
            model = fit_series(train, family, cfg, spec)
            res = recursive_forecast(model, transform(train), horizon, spec, quantiles)
            actual = series[start:start + horizon]
            for h in range(horizon):
                theta = [t[h] for t in res.theta]
                details.append({
                    "lambda": lam,
                    "start": start,
                    "train_end": start - 1,
                    "step": h,
                    "bucket": horizon_bucket(h),
                    "crps": crps_original_scale(family, actual[h], theta),
                    "se": float((res.point[h] - actual[h]) ** 2),
                })
    rows = []
    for lam in grid:
        for name, _, _ in BUCKETS:
            per_window = {}
            for d in details:
                if d["lambda"] == lam and d["bucket"] == name:
                    per_window.setdefault(d["start"], []).append(d)
            if not per_window:
                continue
            crps_w = [np.mean([d["crps"] for d in ds]) for ds in per_window.values()]
            mse_w = [np.mean([d["se"] for d in ds]) for ds in per_window.values()]
            rows.append({
                "lambda": lam,
                "bucket": name,
                "median_crps": float(np.median(crps_w)),
                "median_mse": float(np.median(mse_w)),
                "windows": len(per_window),
            })
    return rows, details


# --- SILSO monthly mean files ------------------------------------------------


@dataclass
class MonthlySeries:
    year: np.ndarray
    month: np.ndarray
    values: np.ndarray

    def index_of(self, year, month):
        hit = np.flatnonzero((self.year == year) & (self.month == month))
        if not hit.size:
            raise KeyError(f"{year}-{month:02d} not in series")
        return int(hit[0])

    def label(self, i):
        """``YYYY-MM`` for index ``i``, extrapolating past the end."""
        y0, m0 = int(self.year[0]), int(self.month[0])
        total = (y0 * 12 + m0 - 1) + int(i)
        return f"{total // 12:04d}-{total % 12 + 1:02d}"

    def __len__(self):
        return self.values.size


def fixture_path():
    return resources.files("dsoft").joinpath("data/silso_monthly_fixture.csv")


def read_silso(path):
    """Parse SILSO monthly means: ``year;month;decimal date;mean;sd;n_obs;definitive``.

    Missing values (-1) become NaN.
    """
    years, months, vals = [], [], []
    with open(path, newline="") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(";")]
            if len(parts) < 4:
                raise ValueError(f"not a SILSO monthly line: {line!r}")
            years.append(int(parts[0]))
            months.append(int(parts[1]))
            v = float(parts[3])
            vals.append(np.nan if v < 0 else v)
    return MonthlySeries(np.array(years), np.array(months), np.array(vals))


def read_series(path, column=None):
    """Read a SILSO file (semicolon dialect, auto-detected) or a comma CSV column."""
    with open(path, newline="") as fh:
        head = fh.readline()
    if ";" in head:
        return read_silso(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    names = list(rows[0])
    col = column or ("y" if "y" in names else None)
    if col not in names:
        raise KeyError(f"column {column or 'y'!r} not found in {path}")
    vals = np.array([float(r[col]) for r in rows])
    if "year" in names and "month" in names:
        year = np.array([int(r["year"]) for r in rows])
        month = np.array([int(r["month"]) for r in rows])
    else:
        year = 2000 + np.arange(vals.size) // 12
        month = np.arange(vals.size) % 12 + 1
    return MonthlySeries(year, month, vals)
