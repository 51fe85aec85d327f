"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION <k>: PASS|FAIL`` line (visible with or
without ``-s``) and then asserts. Run alone with
``pytest tests/test_acceptance.py -v``.
"""
import json
import math
import time

import mpmath as mp
import numpy as np
import pytest

from dsoft import families as F
from dsoft.benchmark import _report, _seeds, benchmark_config, run_benchmark, summarize
from dsoft.cli import main
from dsoft.datagen import simulate_dataset, toy_surfaces
from dsoft.forecast import (LagSpec, fit_series, fixture_path, read_silso, recursive_forecast, seasonal_naive,
                            transform)
from dsoft.forest import ForestModel, fit_forest, predict_forest_eta
from dsoft.gating import GateNode, augment, design_matrix, path_prob, path_prob_grad, path_to
from dsoft.optimizer import iwls_update
from dsoft.scoring import crps, crps_energy_mc, crps_normal, mean_score
from dsoft.tree import Dataset, FitConfig, fit, predict

CODES = ["NO", "GU", "NBI", "GA", "TF"]
NS = (500, 1000, 5000)
REPS = 10
LAM = 10.0


@pytest.fixture
def verdict(capsys):
    def report(k, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {k}: {detail}"
    return report


@pytest.fixture(scope="module")
def signal_benchmark():
    t0 = time.perf_counter()
    rows, reports = run_benchmark("NO", NS, REPS, seed=0, methods=("srt", "baseline"), lam=LAM, with_reports=True)
    return rows, reports, time.perf_counter() - t0


@pytest.fixture(scope="module")
def forest_benchmark():
    """Three n = 5000 cells of the signal benchmark refitted as 25-member forests on the same data."""
    test_seed, cells = _seeds(0, NS, REPS)
    test = simulate_dataset("NO", 10_000, seed=test_seed)
    out = []
    for r in range(3):
        seed = cells[(5000, r)]
        train = simulate_dataset("NO", 5000, seed=seed)
        forest = fit_forest(train, "NO", benchmark_config(LAM, seed), n_trees=25, bag_fraction=0.63, seed=seed)
        eta = predict_forest_eta(forest, test.X)
        score = mean_score("NO", test.y, F.get_family("NO").theta_from_eta(eta))
        out.append((r, forest, eta, score))
    return test, out


# 1 ---------------------------------------------------------------------------


def _states(code, rng, m=200):
    fam = F.get_family(code)
    eta = [rng.uniform(-1.0, 1.0, m), rng.uniform(-1.0, 0.7, m)]
    if code == "TF":
        eta.append(rng.uniform(0.0, 3.0, m))
    theta = fam.theta_from_eta(eta)
    y = fam.sample(theta, rng)
    if code == "GA":
        y = np.maximum(y, 1e-3)
    return fam, y, theta


def _shift(fam, theta, k, h):
    eta = fam.eta_from_theta(theta)
    eta[k] = eta[k] + h
    return fam.theta_from_eta(eta)


def test_criterion_1_derivatives(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_u = worst_d2 = worst_w = 0.0
    for code in CODES:
        fam, y, theta = _states(code, rng)
        for k in range(fam.n_params):
            h = 1e-6
            fd = (fam.logpdf(y, _shift(fam, theta, k, h)) - fam.logpdf(y, _shift(fam, theta, k, -h))) / (2 * h)
            u = fam.score(y, theta, k)
            worst_u = max(worst_u, float(np.max(np.abs(u - fd) / np.maximum(1.0, np.abs(u)))))
            h = 1e-5
            fd2 = (fam.score(y, _shift(fam, theta, k, h), k) - fam.score(y, _shift(fam, theta, k, -h), k)) / (2 * h)
            d2 = fam.d2(y, theta, k)
            worst_d2 = max(worst_d2, float(np.max(np.abs(d2 - fd2) / np.maximum(1.0, np.abs(d2)))))
            if fam.weight_kind[k] == "observed":
                # observed working weights are minus the second derivative
                w = fam.weight(y, theta, k)
                worst_w = max(worst_w, float(np.max(np.abs(w + fd2) / np.maximum(1.0, np.abs(w)))))
    elapsed = time.perf_counter() - t0
    ok = worst_u < 1e-5 and worst_d2 < 1e-4 and worst_w < 1e-4 and elapsed < 10
    verdict(1, ok, f"max rel err score {worst_u:.1e}, d2 {worst_d2:.1e}, observed weight {worst_w:.1e}, "
                   f"{elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------


def _random_tree(rng, max_depth=5, q=3, max_splits=12):
    parent, side, depth, omega = [-1], ["root"], [0], {}
    for _ in range(rng.integers(1, max_splits + 1)):
        leaves = [j for j in range(len(parent)) if j not in omega and depth[j] < max_depth]
        if not leaves:
            break
        leaf = int(rng.choice(leaves))
        omega[leaf] = rng.normal(0.0, 2.0, q + 1)
        parent += [leaf, leaf]
        side += ["L", "R"]
        depth += [depth[leaf] + 1] * 2
    return parent, side, omega


def test_criterion_2_gating_algebra(verdict):
    rng = np.random.default_rng(102)
    worst_sib = worst_leaf = worst_grad = 0.0
    for _ in range(100):
        parent, side, omega = _random_tree(rng)
        N = design_matrix(parent, side, omega, augment(rng.normal(0.0, 2.0, size=(40, 3))))
        for par in omega:
            kids = [j for j in range(len(parent)) if parent[j] == par]
            worst_sib = max(worst_sib, float(np.max(np.abs(N[:, kids].sum(axis=1) - N[:, par]))))
        leaves = [j for j in range(len(parent)) if j not in omega]
        worst_leaf = max(worst_leaf, float(np.max(np.abs(N[:, leaves].sum(axis=1) - 1.0))))
        node = int(rng.integers(1, len(parent)))
        path = path_to(node, parent, side)
        x = rng.normal(size=3)
        grad = path_prob_grad(path, {k: GateNode(v, k) for k, v in omega.items()}, x)
        h = 1e-6
        for g, gvec in grad.items():
            for i in range(4):
                up = {k: GateNode(v.copy(), k) for k, v in omega.items()}
                dn = {k: GateNode(v.copy(), k) for k, v in omega.items()}
                up[g].omega[i] += h
                dn[g].omega[i] -= h
                fd = (path_prob(path, up, x) - path_prob(path, dn, x)) / (2 * h)
                worst_grad = max(worst_grad, abs(gvec[i] - fd) / max(abs(fd), 1e-3))
    ok = worst_sib <= 1e-12 and worst_leaf <= 1e-12 and worst_grad <= 1e-6
    verdict(2, ok, f"sibling {worst_sib:.1e}, leaf sum {worst_leaf:.1e}, gradient rel {worst_grad:.1e}")


# 3 ---------------------------------------------------------------------------


def test_criterion_3_linear_algebra_oracle(verdict):
    rng = np.random.default_rng(103)
    mp.mp.dps = 50
    worst = 0.0
    for i in range(100):
        n, p = 50, int(rng.integers(2, 5))
        N = rng.uniform(0, 1, size=(n, p))
        if i % 3 == 0:
            N[:, -1] = N[:, 0]
        u = rng.normal(size=n)
        w = rng.uniform(0.1, 2.0, size=n)
        beta = iwls_update(N, u, w, 1e-5)
        Nm = mp.matrix(N.tolist())
        A = Nm.T * mp.diag([mp.mpf(v) for v in w]) * Nm + mp.mpf(1e-5) * mp.eye(p)
        ref = np.array([float(v) for v in mp.lu_solve(A, Nm.T * mp.matrix(u.tolist()))])
        worst = max(worst, float(np.max(np.abs(beta - ref) / np.maximum(np.abs(ref), 1e-12 * np.max(np.abs(ref))))))
    verdict(3, worst <= 1e-10, f"max rel err {worst:.1e} over 100 systems (34 rank deficient)")


# 4 ---------------------------------------------------------------------------


def _trace_ok(rep):
    r = rep["report"]
    acc = [t for t in r["trace"] if t["accepted"]]
    ll = [t["loglik"] for t in acc]
    ic = [t["criterion"] for t in acc]
    ok = all(b >= a for a, b in zip(ll, ll[1:])) and all(b < a for a, b in zip(ic, ic[1:]))
    if r["stop_reason"] == "criterion":
        ok = ok and not r["trace"][-1]["accepted"] and r["trace"][-1]["criterion"] >= ic[-1]
    return ok and r["df"] == rep["n_coef"] == acc[-1]["df"]


def test_criterion_4_fit_monotonicity(verdict, signal_benchmark, forest_benchmark):
    _, reports, _ = signal_benchmark
    _, forests = forest_benchmark
    reports = list(reports) + [_report(5000, r, "srf", i, m) for r, f, _, _ in forests
                               for i, m in enumerate(f.members)]
    bad = [(x["n"], x["replication"], x["method"], x["member"]) for x in reports if not _trace_ok(x)]
    verdict(4, not bad, f"{len(reports)} fits checked, violations {bad}")


# 5 ---------------------------------------------------------------------------


def test_criterion_5_signal_recovery(verdict, signal_benchmark):
    rows, _, elapsed = signal_benchmark
    s = summarize(rows)
    rmse = [s[("NO", n, "srt", "rmse_eta_mu")] for n in NS]
    crps_ratio = s[("NO", 5000, "srt", "crps")] / s[("NO", 5000, "baseline", "crps")]
    rmse_ratio = rmse[-1] / s[("NO", 5000, "baseline", "rmse_eta_mu")]
    ok = all(b <= a for a, b in zip(rmse, rmse[1:])) and crps_ratio <= 0.6 and rmse_ratio <= 0.5 and elapsed < 900
    verdict(5, ok, f"median RMSE eta_mu {[round(v, 4) for v in rmse]}, CRPS ratio {crps_ratio:.3f}, "
                   f"RMSE ratio {rmse_ratio:.3f}, {elapsed:.0f}s")


# 6 ---------------------------------------------------------------------------


def test_criterion_6_smooth_interaction(verdict):
    t0 = time.perf_counter()
    train = toy_surfaces("sine2d", noise_sd=0.1, seed=1)
    model = fit(train, "NO", FitConfig(seed=0))
    test = toy_surfaces("sine2d", noise_sd=0.1, seed=2)
    mu = predict(model, test.X)[0]
    rmse = float(np.sqrt(np.mean((mu - test.extra["f_true"]) ** 2)))
    n_coef = model.trees[0].beta.size
    elapsed = time.perf_counter() - t0
    ok = train.n == 10_000 and rmse < 0.15 and n_coef <= 129 and elapsed < 300
    verdict(6, ok, f"RMSE vs truth {rmse:.4f}, mu coefficients {n_coef}, {elapsed:.0f}s")


# 7 ---------------------------------------------------------------------------


def _cosine_fixture(seed, n=400):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, n)
    return Dataset(x[:, None], np.cos(2.0 * x) + rng.normal(0.0, 0.3, n), ["x"])


def test_criterion_7_shrinkage(verdict):
    lams = (0.0001, 0.1, 10.0, 1000.0)
    grid = np.linspace(-3.0, 3.0, 601)[:, None]
    tv = {lam: [] for lam in lams}
    for seed in range(5):
        data = _cosine_fixture(seed)
        for lam in lams:
            mu = predict(fit(data, "NO", FitConfig(seed=seed).with_lambda(lam)), grid)[0]
            tv[lam].append(float(np.sum(np.abs(np.diff(mu)))))
    med = [float(np.median(tv[lam])) for lam in lams]
    # an intercept-only curve is flat, so its total variation is 0
    tv_flat = 0.0
    monotone = all(b <= a + 1e-12 for a, b in zip(med, med[1:]))
    near_flat = abs(med[-1] - tv_flat) <= 0.10 * med[0]
    verdict(7, monotone and near_flat, f"median TV {[round(v, 4) for v in med]} for lambda {list(lams)}")


# 8 ---------------------------------------------------------------------------


def test_criterion_8_forest_parity(verdict, signal_benchmark, forest_benchmark):
    rows, _, _ = signal_benchmark
    test, forests = forest_benchmark
    tree_crps = [v for _, n, r, m, k, v in rows if n == 5000 and r < 3 and m == "srt" and k == "crps"]
    forest_crps = [score for *_, score in forests]
    ratio = float(np.median(forest_crps) / np.median(tree_crps))
    rng = np.random.default_rng(108)
    _, forest, eta, _ = forests[0]
    invariant = True
    for _ in range(3):
        perm = [forest.members[i] for i in rng.permutation(len(forest.members))]
        shuffled = ForestModel(perm, forest.bag_fraction, forest.n_trees, forest.seed, forest.subsamples)
        invariant &= all(np.array_equal(a, b) for a, b in zip(eta, predict_forest_eta(shuffled, test.X)))
    verdict(8, ratio <= 1.05 and invariant, f"forest/tree median CRPS {ratio:.3f} "
                                             f"({np.median(forest_crps):.4f} vs {np.median(tree_crps):.4f}, "
                                             f"3 replications), permutation invariant {invariant}")


# 9 ---------------------------------------------------------------------------


def test_criterion_9_crps(verdict):
    rng = np.random.default_rng(109)
    y, mu, sigma = rng.normal(0, 2, 100), rng.normal(0, 1, 100), rng.uniform(0.2, 3.0, 100)
    gap = float(np.max(np.abs(crps_normal(y, mu, sigma) - crps("NO", y, [mu, sigma], method="quadrature"))))
    zs = []
    for code in ("GU", "GA", "TF"):
        fam = F.get_family(code)
        for _ in range(3):
            eta = [rng.uniform(-1, 1), rng.uniform(-1, 0.5)] + ([rng.uniform(0.5, 3.0)] if code == "TF" else [])
            theta = [float(t) for t in fam.theta_from_eta([np.asarray(e) for e in eta])]
            obs = float(fam.sample(theta, rng))
            mc, se = crps_energy_mc(fam.sample(theta, rng, size=1_000_000), obs, rng)
            zs.append(abs(crps(code, obs, theta) - mc) / se)
    ok = gap <= 1e-6 and max(zs) <= 3.0
    verdict(9, ok, f"closed form vs quadrature {gap:.1e}; max |quadrature - MC| / SE {max(zs):.2f} over 9 states")


# 10 --------------------------------------------------------------------------


def _sunspot_forecast(train, spec, seed):
    model = fit_series(train, "GA", FitConfig(seed=seed).with_lambda(50.0), spec)
    return recursive_forecast(model, transform(train), 100, spec, quantiles=(0.05, 0.5, 0.95))


def test_criterion_10_forecast(verdict):
    spec = LagSpec()
    s = read_silso(fixture_path())
    cut = s.index_of(1999, 3)
    train, held = s.values[:cut], s.values[cut:cut + 100]
    res = _sunspot_forecast(train, spec, seed=0)  # the documented default seed decides the verdict
    q = res.quantiles
    mse = float(np.mean((res.point - held) ** 2))
    mse_naive = float(np.mean((seasonal_naive(train, 100) - held) ** 2))
    bit_exact = transform(0.0) == math.sqrt(0.001) and np.array_equal(transform(held), np.sqrt(held + 0.001))
    ok = (len(spec.columns()) == 57 and bit_exact and held.size == 100 and np.all(np.isfinite(res.point))
          and np.all(res.point >= 0) and np.all(q[0.05] <= q[0.5]) and np.all(q[0.5] <= q[0.95])
          and mse < mse_naive)
    # diagnostic only: how the single-fit outcome varies with the fit seed
    sweep = [mse] + [float(np.mean((_sunspot_forecast(train, spec, sd).point - held) ** 2)) for sd in range(1, 5)]
    verdict(10, ok, f"57 lag columns, train through {s.label(cut - 1)}, seed-0 100-step MSE {mse:.0f} "
                    f"vs seasonal-naive {mse_naive:.0f}; seeds 0-4 (diagnostic) {[round(v) for v in sweep]}")


# 11 --------------------------------------------------------------------------


def test_criterion_11_determinism(verdict, tmp_path, capsys):
    d = tmp_path
    silso = str(fixture_path())
    commands = {
        "simulate": ["simulate", "--family", "GU", "--n", "300", "--seed", "5"],
        "fit": ["fit", "--data", str(d / "simulate_a"), "--family", "GU", "--max-nodes", "8", "--seed", "5",
                "--features", "x1,x2,x3,x4,x5,z1,z2,z3,z4"],
        "predict": ["predict", "--model", str(d / "fit_a"), "--data", str(d / "simulate_a")],
        "score": ["score", "--model", str(d / "fit_a"), "--data", str(d / "simulate_a")],
        "forecast": ["forecast", "--data", silso, "--family", "GA", "--train-end", "1970-12", "--horizon", "12",
                     "--max-nodes", "4", "--seed", "5"],
        "gridsearch": ["gridsearch", "--data", silso, "--family", "GA", "--grid", "50", "--windows", "1960-01:3",
                       "--max-nodes", "2", "--seed", "5"],
        "benchmark": ["benchmark", "--n", "150", "--reps", "2", "--test-n", "500", "--max-nodes", "4",
                      "--methods", "srt,srf,baseline", "--trees", "2", "--seed", "5"],
    }
    same = {}
    for name, args in commands.items():
        outs = []
        for tag in ("a", "b"):
            out = d / f"{name}_{tag}"
            code = main(args + ["--out", str(out)])
            printed = capsys.readouterr().out
            outs.append((code, out.read_bytes(), printed))
        same[name] = outs[0][0] == 0 and outs[0] == outs[1]
    verdict(11, all(same.values()), json.dumps(same))
