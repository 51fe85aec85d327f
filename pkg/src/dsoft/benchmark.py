"""Simulation benchmark on the Friedman design: soft trees vs. an intercept-only baseline."""

from __future__ import annotations

import logging

import numpy as np
from joblib import Parallel, delayed

from .datagen import X_COLUMNS, Z_COLUMNS, simulate_dataset
from .families import fit_intercept_only, get_family
from .forest import fit_forest, predict_forest_eta
from .scoring import mean_score, predictor_rmse
from .tree import FitConfig, fit, predict_eta

log = logging.getLogger(__name__)

METHODS = ("srt", "baseline", "srf")
TEST_N = 10_000
HEADER = ["family", "n", "replication", "method", "metric", "value"]


def benchmark_config(lam=10.0, seed=0, **kw):
    """Location tree on x1..x5, scale tree on z1..z4 (the design's true dependence)."""
    cfg = FitConfig(seed=seed, features={"mu": list(X_COLUMNS), "sigma": list(Z_COLUMNS)}, **kw)
    return cfg.with_lambda(lam)


def _seeds(seed, ns, reps):
    """Independent integer seeds for the test set and every (n, replication) cell."""
    ss = np.random.SeedSequence(seed)
    test_ss, *cells = ss.spawn(1 + len(ns) * reps)
    test_seed = int(test_ss.generate_state(1)[0])
    out = {}
    for i, n in enumerate(ns):
        for r in range(reps):
            out[(n, r)] = int(cells[i * reps + r].generate_state(1)[0])
    return test_seed, out


def _metrics(family, eta_hat, test):
    theta = family.theta_from_eta(eta_hat)
    metric = "log_score" if family.discrete else "crps"
    return {
        "rmse_eta_mu": predictor_rmse(eta_hat[0], test.extra["eta_mu_true"]),
        "rmse_eta_sigma": predictor_rmse(eta_hat[1], test.extra["eta_sigma_true"]),
        metric: mean_score(family, test.y, theta),
    }


def _report(n, rep, method, member, model):
    n_coef = sum(t.beta.size for t in model.trees.values()) + len(model.fixed_params)
    return {"n": int(n), "replication": int(rep), "method": method, "member": member,
            "n_coef": int(n_coef), "report": model.fit_report}


def run_cell(family, n, rep, seed, test, methods, lam, n_trees=25, bag_fraction=0.63, with_reports=False):
    """Rows for one (n, replication) cell; with ``with_reports`` also the fit report of every fitted tree."""
    family = get_family(family)
    train = simulate_dataset(family, n, seed=seed)
    out, reports = [], []
    m = test.n
    for method in methods:
        if method == "baseline":
            eta0 = family.eta_from_theta(fit_intercept_only(family, train.y))
            eta_hat = [np.full(m, float(e)) for e in eta0]
        elif method == "srt":
            model = fit(train, family, benchmark_config(lam, seed))
            eta_hat = predict_eta(model, test.X)
            reports.append(_report(n, rep, method, None, model))
        elif method == "srf":
            forest = fit_forest(train, family, benchmark_config(lam, seed), n_trees=n_trees,
                                bag_fraction=bag_fraction, seed=seed)
            eta_hat = predict_forest_eta(forest, test.X)
            reports += [_report(n, rep, method, i, mm) for i, mm in enumerate(forest.members)]
        else:
            raise ValueError(f"unknown method {method!r}")
        for metric, value in _metrics(family, eta_hat, test).items():
            out.append([family.name, int(n), int(rep), method, metric, float(value)])
    log.info("benchmark %s n=%d rep=%d done", family.name, n, rep)
    return (out, reports) if with_reports else out


def run_benchmark(family="NO", ns=(500, 1000, 5000), reps=10, seed=0, methods=("srt", "baseline"),
                  lam=10.0, test_n=TEST_N, n_trees=25, bag_fraction=0.63, n_jobs=1, with_reports=False):
    """Tidy rows ``(family, n, replication, method, metric, value)``.

    Every cell draws its own training set from a seed spawned off ``seed``;
    all cells share one test set, so results do not depend on ``n_jobs``.
    With ``with_reports`` returns ``(rows, reports)``, see :func:`run_cell`.
    """
    family = get_family(family)
    ns = [int(n) for n in ns]
    test_seed, cell_seeds = _seeds(seed, ns, reps)
    test = simulate_dataset(family, test_n, seed=test_seed)
    jobs = [delayed(run_cell)(family, n, r, cell_seeds[(n, r)], test, methods, lam, n_trees, bag_fraction, True)
            for n in ns for r in range(reps)]
    results = Parallel(n_jobs=n_jobs)(jobs)
    rows = [row for cell, _ in results for row in cell]
    if with_reports:
        return rows, [rep for _, reps_ in results for rep in reps_]
    return rows


def summarize(rows):
    """Median ``value`` per (family, n, method, metric)."""
    groups = {}
    for fam, n, _, method, metric, value in rows:
        groups.setdefault((fam, n, method, metric), []).append(value)
    return {k: float(np.median(v)) for k, v in sorted(groups.items())}
