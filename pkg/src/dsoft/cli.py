"""``dsoft`` command line: fit, predict, score, simulate, forecast, gridsearch, benchmark.

Exit codes: 0 success, 2 bad input (arguments, files, data), 3 fit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import io as dio
from .benchmark import HEADER as BENCH_HEADER
from .benchmark import run_benchmark
from .datagen import simulate_dataset, toy_surfaces
from .families import DomainError, FAMILIES, get_family
from .forecast import (DEFAULT_LAMBDAS, LagSpec, fit_series, lambda_grid_search, read_series,
                       recursive_forecast, transform)
from .forest import ForestModel, fit_forest, predict_forest_eta
from .gating import StructureError
from .scoring import UnsupportedMetric, crps, log_score
from .tree import FitConfig, FitError, fit, predict_eta

log = logging.getLogger("dsoft")

DEFAULT_SEED = 0
EXIT_INPUT = 2
EXIT_FIT = 3


class InputError(Exception):
    pass


def _available_cores():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def resolve_seed(seed):
    """Explicit flag, then ``DSOFT_SEED``, then 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get("DSOFT_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise InputError(f"DSOFT_SEED must be an integer, got {env!r}") from None
    return DEFAULT_SEED


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    return [int(v) for v in _floats(text)]


def load_config(path):
    with open(path) as fh:
        text = fh.read()
    if path.endswith((".yaml", ".yml")):
        import yaml

        d = yaml.safe_load(text) or {}
    else:
        d = json.loads(text)
    if not isinstance(d, dict):
        raise InputError(f"{path}: config must be a mapping")
    return {k.replace("-", "_"): v for k, v in d.items()}


def _fit_config(args):
    features = {}
    for spec in args.param_features or []:
        name, _, cols = spec.partition("=")
        if not cols:
            raise InputError(f"--param-features expects NAME=col1,col2, got {spec!r}")
        features[name] = [c for c in cols.split(",") if c]
    cfg = FitConfig(criterion=args.criterion, max_nodes=args.max_nodes, seed=args.seed, refine=args.refine,
                    growth=args.growth, features=features, candidate_restarts=args.restarts)
    return cfg.with_lambda(args.lam)


# --- commands ------------------------------------------------------------------


def cmd_fit(args):
    data = dio.read_dataset(args.data, args.response, _split(args.features))
    family = get_family(args.family)
    cfg = _fit_config(args)
    if args.trees > 0:
        model = fit_forest(data, family, cfg, n_trees=args.trees, bag_fraction=args.bag, seed=args.seed,
                           n_jobs=args.jobs)
    else:
        model = fit(data, family, cfg)
    dio.save(model, args.out)
    if not isinstance(model, ForestModel):
        log.info("%s", model.summary())
    return 0


def _split(text):
    return [c for c in text.split(",") if c] if text else None


def _columns(model):
    return model.members[0].columns if isinstance(model, ForestModel) else model.columns


def _predict(model, X):
    if isinstance(model, ForestModel):
        eta = predict_forest_eta(model, X)
    else:
        eta = predict_eta(model, X)
    return eta, model.family.theta_from_eta(eta)


def cmd_predict(args):
    model = dio.load(args.model)
    X = dio.read_features(args.data, _columns(model))
    eta, theta = _predict(model, X)
    names = list(model.family.param_names)
    header = names + [f"eta_{p}" for p in names]
    rows = [[float(t[i]) for t in theta] + [float(e[i]) for e in eta] for i in range(X.shape[0])]
    dio.write_csv(args.out, header, rows)
    return 0


def cmd_score(args):
    model = dio.load(args.model)
    cols = _columns(model)
    data = dio.read_dataset(args.data, args.response, cols)
    _, theta = _predict(model, data.X)
    fam = model.family
    ls = log_score(fam, data.y, theta)
    summary = {
        "n": int(data.n),
        "loglik": float(-np.sum(ls)),
        "log_score_mean": float(np.mean(ls)),
        "log_score_median": float(np.median(ls)),
    }
    per_row = {"log_score": ls}
    if not fam.discrete:
        c = np.asarray(crps(fam, data.y, theta), dtype=float)
        summary["crps_mean"] = float(np.mean(c))
        summary["crps_median"] = float(np.median(c))
        per_row["crps"] = c
    if args.out:
        names = list(per_row)
        dio.write_csv(args.out, names, [[float(per_row[k][i]) for k in names] for i in range(data.n)])
    print(json.dumps(summary, indent=1))
    return 0


def cmd_simulate(args):
    if args.toy:
        data = toy_surfaces(args.toy, n=args.n, noise_sd=args.noise_sd, seed=args.seed)
    else:
        data = simulate_dataset(args.family, args.n or 1000, seed=args.seed)
    integer_y = not args.toy and get_family(args.family).discrete
    extra = sorted(data.extra)
    header = list(data.columns) + ["y"] + extra
    rows = []
    for i in range(data.n):
        y = int(data.y[i]) if integer_y else float(data.y[i])
        rows.append([float(v) for v in data.X[i]] + [y] + [float(data.extra[k][i]) for k in extra])
    dio.write_csv(args.out, header, rows)
    return 0


def _cut(series, train_end):
    """Index of the first month after ``train_end`` (YYYY-MM); the whole series if None."""
    if not train_end:
        return len(series)
    try:
        year, month = (int(p) for p in train_end.split("-"))
    except ValueError:
        raise InputError(f"--train-end expects YYYY-MM, got {train_end!r}") from None
    return series.index_of(year, month) + 1


def _quantile_name(p):
    return "q" + format(100 * p, "g").replace(".", "_").zfill(2)


def cmd_forecast(args):
    series = read_series(args.data, args.column)
    end = _cut(series, args.train_end)
    history = series.values[:end]
    if np.any(np.isnan(history)):
        raise InputError("training history has missing values")
    qs = sorted(set(_floats(args.quantiles)) | {0.5})
    if any(not 0 < q < 1 for q in qs):
        raise InputError("quantiles must lie strictly between 0 and 1")
    cfg = _fit_config(args)
    model = fit_series(history, args.family, cfg, LagSpec(), n_trees=args.trees, bag_fraction=args.bag,
                       n_jobs=args.jobs)
    res = recursive_forecast(model, transform(history), args.horizon, LagSpec(), qs)
    names = list(model.family.param_names)
    header = ["step", "date"] + [_quantile_name(q) for q in qs] + ["point"] + names
    rows = []
    for h in range(args.horizon):
        rows.append([h + 1, series.label(end + h)] + [float(res.quantiles[q][h]) for q in qs]
                    + [float(res.point[h])] + [float(t[h]) for t in res.theta])
    dio.write_csv(args.out, header, rows)
    return 0


def _windows(series, text):
    out = []
    for item in text.split(","):
        start, _, horizon = item.strip().partition(":")
        if not horizon:
            raise InputError(f"--windows expects YYYY-MM:horizon items, got {item!r}")
        year, month = (int(p) for p in start.split("-"))
        out.append((series.index_of(year, month), int(horizon)))
    return out


def cmd_gridsearch(args):
    series = read_series(args.data, args.column)
    windows = _windows(series, args.windows)
    grid = _floats(args.grid)
    cfg = _fit_config(args)
    rows, _ = lambda_grid_search(series.values, args.family, grid, windows, LagSpec(), cfg)
    header = ["lambda", "bucket", "median_crps", "median_mse", "windows"]
    dio.write_csv(args.out, header, [[r[h] for h in header] for r in rows])
    return 0


def cmd_benchmark(args):
    methods = _split(args.methods)
    rows = run_benchmark(args.family, _ints(args.n), args.reps, seed=args.seed, methods=methods, lam=args.lam,
                         test_n=args.test_n, n_trees=args.trees or 25, bag_fraction=args.bag, n_jobs=args.jobs)
    dio.write_csv(args.out, BENCH_HEADER, rows)
    return 0


# --- parser --------------------------------------------------------------------


def _common(p, fit_opts=True):
    p.add_argument("--config", help="JSON or YAML file with defaults for any flag")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $DSOFT_SEED, else 0)")
    p.add_argument("--jobs", type=int, default=_available_cores(), help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    if fit_opts:
        p.add_argument("--family", default="NO", choices=sorted(FAMILIES))
        p.add_argument("--lambda", dest="lam", type=float, default=10.0, help="gate-weight shrinkage")
        p.add_argument("--criterion", default="AIC", choices=["AIC", "BIC"])
        p.add_argument("--max-nodes", type=int, default=64)
        p.add_argument("--restarts", type=int, default=5, help="random restarts per candidate split")
        p.add_argument("--refine", default="all", choices=["all", "new_only", "none"])
        p.add_argument("--growth", default="per_param", choices=["per_param", "best_param"])
        p.add_argument("--param-features", action="append", metavar="NAME=COLS",
                       help="restrict a parameter's tree to some columns, e.g. sigma=z1,z2")
        p.add_argument("--trees", type=int, default=0, help="forest size (0 fits a single tree)")
        p.add_argument("--bag", type=float, default=0.63, help="forest subsample fraction")


def build_parser():
    parser = argparse.ArgumentParser(prog="dsoft", description="Distributional soft regression trees")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a CSV file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--response", default="y")
    p.add_argument("--features", help="comma-separated feature columns (default: all but the response)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict distribution parameters")
    _common(p, fit_opts=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", help="log score and CRPS of a model on labelled data")
    _common(p, fit_opts=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--response", default="y")
    p.add_argument("--out", help="optional per-row scores CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("simulate", help="write a simulated data set")
    _common(p, fit_opts=False)
    p.add_argument("--family", default="NO", choices=["NO", "GU", "NBI"])
    p.add_argument("--toy", choices=["sine2d", "step_oscillation"], help="toy surface instead of the Friedman design")
    p.add_argument("--n", type=int, default=None, help="rows (default 1000; toy surfaces use their own size)")
    p.add_argument("--noise-sd", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("forecast", help="recursive forecast of a monthly series")
    _common(p)
    p.add_argument("--data", required=True, help="SILSO semicolon file or CSV with a value column")
    p.add_argument("--column", default=None, help="value column for comma CSV input (default y)")
    p.add_argument("--train-end", default=None, help="last training month YYYY-MM (default: end of data)")
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--quantiles", default="0.05,0.95")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("gridsearch", help="evaluate shrinkage values on forecast windows")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--column", default=None)
    p.add_argument("--grid", default=",".join(format(v, "g") for v in DEFAULT_LAMBDAS))
    p.add_argument("--windows", required=True, help="comma-separated YYYY-MM:horizon forecast windows")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("benchmark", help="simulation benchmark on the Friedman design")
    _common(p)
    p.set_defaults(family="NO", trees=25)
    p.add_argument("--n", default="500,1000,5000")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--methods", default="srt,baseline")
    p.add_argument("--test-n", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = load_config(args.config)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        bad = sorted(set(cfg) - known)
        if bad:
            parser.error(f"unknown config keys: {bad}")
        # config supplies defaults; explicit flags still win
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.seed = resolve_seed(args.seed)
        return args.func(args)
    except FitError as exc:
        print(f"dsoft {args.command}: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (InputError, KeyError, ValueError, OSError, DomainError, StructureError, UnsupportedMetric) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dsoft {args.command}: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
