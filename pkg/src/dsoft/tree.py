"""Distributional adaptive soft regression trees: growth, stopping and prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .families import DomainError, Family, fit_intercept_only, get_family
from .gating import StructureError, augment, check_topology, design_matrix, sigmoid
from .optimizer import GateObjective, ShrinkageConfig, iwls_update, optimize_gate, refine_all_gates

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass
class Dataset:
    """Feature matrix plus response; ``extra`` carries side columns (e.g. true predictors)."""

    X: np.ndarray
    y: np.ndarray
    columns: list
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.columns = list(self.columns)
        if self.X.shape[0] != self.y.size:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.size}")
        if self.X.shape[1] != len(self.columns):
            raise ValueError("column names do not match the feature matrix")

    @property
    def n(self):
        return self.y.size

    def subset(self, rows):
        rows = np.asarray(rows)
        return Dataset(self.X[rows], self.y[rows], self.columns, {k: np.asarray(v)[rows] for k, v in self.extra.items()})


@dataclass
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X, enabled=True):
        X = np.asarray(X, dtype=float)
        if not enabled:
            return cls(np.zeros(X.shape[1]), np.ones(X.shape[1]))
        sd = X.std(axis=0)
        sd[~(sd > 0)] = 1.0
        return cls(X.mean(axis=0), sd)

    def __call__(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.sd


@dataclass
class SoftTree:
    """One parameter's adaptive soft tree.

    Node ids follow creation order; a split of node ``l`` creates ids
    ``J + 1`` (left) and ``J + 2`` (right). ``beta[j]`` belongs to node ``j``
    and ``beta[0]`` is the intercept.
    """

    features: list
    parent: list = field(default_factory=lambda: [-1])
    side: list = field(default_factory=lambda: ["root"])
    omega: dict = field(default_factory=dict)
    beta: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @property
    def n_nodes(self):
        return len(self.parent)

    @property
    def n_coef(self):
        return self.beta.size

    def leaves(self):
        return [j for j in range(self.n_nodes) if j not in self.omega]

    def add_split(self, node, omega, beta_c):
        if node in self.omega or not 0 <= node < self.n_nodes:
            raise StructureError(f"node {node} cannot be split")
        self.omega[node] = np.asarray(omega, dtype=float).copy()
        self.parent += [node, node]
        self.side += ["L", "R"]
        self.beta = np.concatenate([self.beta, np.asarray(beta_c, dtype=float)])

    def design(self, Xa):
        return design_matrix(self.parent, self.side, self.omega, Xa)

    def eta(self, Xa):
        return self.design(Xa) @ self.beta

    def validate(self, n_features):
        check_topology(self.parent, self.side, self.omega)
        if self.beta.size != self.n_nodes:
            raise StructureError("beta length must equal the number of nodes")
        for w in self.omega.values():
            if w.size != len(self.features) + 1:
                raise StructureError("gate weight length does not match the tree's features")
        if any(not 0 <= f < n_features for f in self.features):
            raise StructureError("tree refers to an unknown feature column")


@dataclass
class FitConfig:
    shrinkage: object = field(default_factory=ShrinkageConfig)
    criterion: str = "AIC"
    max_nodes: int = 64
    candidate_restarts: int = 5
    seed: int = 0
    refine: str = "all"
    growth: str = "per_param"
    standardize: bool = True
    init_sd: float = 0.5
    max_rounds: int = 3
    max_iter: int = 500
    row_tol: float = 1e-10
    # parameter name -> list of column names; missing parameters use all columns
    features: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.criterion.upper() not in ("AIC", "BIC"):
            raise ValueError("criterion must be AIC or BIC")
        self.criterion = self.criterion.upper()
        if self.max_nodes < 2 or self.max_nodes % 2:
            raise ValueError("max_nodes must be an even number >= 2")
        if self.refine not in ("all", "new_only", "none"):
            raise ValueError("refine must be 'all', 'new_only' or 'none'")
        if self.growth not in ("per_param", "best_param"):
            raise ValueError("growth must be 'per_param' or 'best_param'")

    def shrinkage_for(self, name):
        if isinstance(self.shrinkage, dict):
            return self.shrinkage.get(name, ShrinkageConfig())
        return self.shrinkage

    def with_lambda(self, lam):
        if isinstance(self.shrinkage, dict):
            shr = {k: replace(v, lam=lam) for k, v in self.shrinkage.items()}
        else:
            shr = replace(self.shrinkage, lam=lam)
        return replace(self, shrinkage=shr)


@dataclass
class DistModel:
    family: Family
    columns: list
    standardizer: Standardizer
    trees: dict  # parameter index -> SoftTree
    fixed_params: dict  # parameter index -> constant predictor (link scale)
    fit_report: dict = field(default_factory=dict)
    config: FitConfig | None = None

    @property
    def df(self):
        return sum(t.n_coef for t in self.trees.values()) + len(self.fixed_params)

    def summary(self):
        parts = [f"{self.family.name} model, df={self.df}"]
        for k, t in sorted(self.trees.items()):
            parts.append(f"  {self.family.param_names[k]}: {len(t.omega)} splits, {t.n_coef} coefficients")
        for k, e in sorted(self.fixed_params.items()):
            val = float(self.family.links[k].inverse(e))
            parts.append(f"  {self.family.param_names[k]}: fixed at {val:.6g}")
        return "\n".join(parts)


def information_criterion(loglik, df, n, kind="AIC"):
    kind = kind.upper()
    if kind == "AIC":
        return -2.0 * loglik + 2.0 * df
    if kind == "BIC":
        return -2.0 * loglik + math.log(n) * df
    raise ValueError(f"unknown criterion {kind!r}")


# --- fitting -----------------------------------------------------------------


class _GrowState:
    """Mutable training-set state; every tree predictor is kept as ``P @ beta``."""

    def __init__(self, family, y, Xa, trees, eta_fixed, max_nodes):
        self.family = family
        self.y = y
        self.n = y.size
        self.Xa = Xa  # parameter index -> augmented features (None for fixed)
        self.trees = trees
        self.K = family.n_params
        self.eta = [None] * self.K
        self._P = {}
        self.probs = {k: {} for k in trees}
        for k, tree in trees.items():
            self._P[k] = np.zeros((self.n, max_nodes + 1))
            self._P[k][:, 0] = 1.0
        self.eta_fixed = dict(eta_fixed)
        for k in range(self.K):
            if k in trees:
                self._refresh(k)
            else:
                self.eta[k] = np.full(self.n, self.eta_fixed[k])

    def columns(self, k):
        return self._P[k][:, : self.trees[k].n_nodes]

    def _refresh(self, k, start=1):
        tree = self.trees[k]
        P = self._P[k]
        for j in range(start, tree.n_nodes):
            p = self.probs[k][tree.parent[j]]
            P[:, j] = P[:, tree.parent[j]] * (p if tree.side[j] == "L" else 1.0 - p)
        self.eta[k] = self.columns(k) @ tree.beta

    def theta(self):
        return self.family.theta_from_eta(self.eta)

    def loglik(self):
        with np.errstate(all="ignore"):
            return float(np.sum(self.family.logpdf(self.y, self.theta())))

    def set_gate(self, k, node, omega):
        tree = self.trees[k]
        tree.omega[node] = np.asarray(omega, dtype=float).copy()
        self.probs[k][node] = sigmoid(self.Xa[k] @ tree.omega[node])
        # descendants have larger ids than their ancestors
        first = min(j for j in range(1, tree.n_nodes) if tree.parent[j] == node)
        self._refresh(k, first)

    def shift_beta(self, k, nodes, step):
        tree = self.trees[k]
        tree.beta[list(nodes)] += step
        self.eta[k] = self.columns(k) @ tree.beta

    def split(self, k, node, omega, beta_c):
        tree = self.trees[k]
        tree.add_split(node, omega, beta_c)
        self.probs[k][node] = sigmoid(self.Xa[k] @ tree.omega[node])
        self._refresh(k, tree.n_nodes - 2)

    def set_fixed(self, k, value):
        self.eta_fixed[k] = value
        self.eta[k] = np.full(self.n, value)


def _update_fixed(state, iters=25):
    fam = state.family
    for k in sorted(state.eta_fixed):
        for _ in range(iters):
            theta = state.theta()
            u = float(np.sum(fam.score(state.y, theta, k)))
            w = float(np.sum(fam.weight(state.y, theta, k)))
            if abs(u) < 1e-9 * state.n or not w > 0:
                break
            cur = state.loglik()
            old = state.eta_fixed[k]
            step = u / w
            for _ in range(30):
                state.set_fixed(k, old + step)
                if state.loglik() >= cur:
                    break
                step *= 0.5
            else:
                state.set_fixed(k, old)
                break


def _candidate(state, k, leaf, inits, cfg, config):
    """Best gate for splitting ``leaf`` of tree ``k``: (loglik gain, omega, beta_c)."""
    fam = state.family
    P_leaf = state.columns(k)[:, leaf]
    rows = np.flatnonzero(P_leaf > config.row_tol)
    if rows.size < 2:
        return None
    y = state.y[rows]
    Xa = state.Xa[k][rows]
    Pl = P_leaf[rows]
    theta = [t[rows] for t in state.theta()]
    eta = state.eta[k][rows]
    link = fam.links[k]
    u0 = fam.score(y, theta, k)
    w0 = fam.weight(y, theta, k)

    def ll_at(eta_k):
        th = list(theta)
        th[k] = link.inverse(eta_k)
        with np.errstate(all="ignore"):
            return float(np.sum(fam.logpdf(y, th)))

    def pen(w):
        m = np.ones(w.size)
        if not cfg.penalize_bias:
            m[0] = 0.0
        return cfg.lam * float(np.sum(m * w * w))

    base = ll_at(eta)
    best = None
    for omega in inits:
        p = sigmoid(Xa @ omega)
        Nc = np.column_stack([Pl * p, Pl * (1.0 - p)])
        beta = iwls_update(Nc, u0, w0, cfg.ridge_zeta)
        ll = ll_at(eta + Nc @ beta)
        if not np.isfinite(ll):
            beta = np.zeros(2)
            ll = base
        cur = ll - pen(omega)
        for _ in range(config.max_rounds):
            obj = GateObjective(fam, y, theta, k, Xa, eta + Pl * beta[1], Pl * (beta[0] - beta[1]))
            omega = optimize_gate(obj, omega, cfg)
            p = sigmoid(Xa @ omega)
            Nc = np.column_stack([Pl * p, Pl * (1.0 - p)])
            ll = ll_at(eta + Nc @ beta)
            th = list(theta)
            th[k] = link.inverse(eta + Nc @ beta)
            step = iwls_update(Nc, fam.score(y, th, k), fam.weight(y, th, k), cfg.ridge_zeta)
            for _ in range(30):
                if not np.any(step):
                    break
                trial = ll_at(eta + Nc @ (beta + step))
                if np.isfinite(trial) and trial >= ll:
                    beta = beta + step
                    ll = trial
                    break
                step = 0.5 * step
            new = ll - pen(omega)
            done = new - cur <= 1e-6 * max(1.0, abs(cur) / max(1, y.size))
            cur = max(cur, new)
            if done:
                break
        val = ll - pen(omega)
        if best is None or val > best[0]:
            best = (val, ll - base, omega.copy(), beta.copy())
    if best is None or not np.isfinite(best[1]):
        return None
    return best[1], best[2], best[3]


def _best_split(state, k, config, rng):
    tree = state.trees[k]
    if tree.n_nodes - 1 + 2 > config.max_nodes:
        return None
    cfg = config.shrinkage_for(state.family.param_names[k])
    q1 = state.Xa[k].shape[1]
    best = None
    for leaf in tree.leaves():
        inits = [np.zeros(q1)] + [rng.normal(0.0, config.init_sd, q1) for _ in range(config.candidate_restarts)]
        cand = _candidate(state, k, leaf, inits, cfg, config)
        if cand is None:
            continue
        if best is None or cand[0] > best[1]:
            best = (leaf, cand[0], cand[1], cand[2])
    if best is None:
        return None
    leaf, _, omega, beta = best
    # exact full-data log-likelihood of the proposed split
    p = sigmoid(state.Xa[k] @ omega)
    P_leaf = state.columns(k)[:, leaf]
    eta_new = state.eta[k] + P_leaf * p * beta[0] + P_leaf * (1.0 - p) * beta[1]
    theta = state.theta()
    theta[k] = state.family.links[k].inverse(eta_new)
    with np.errstate(all="ignore"):
        ll = float(np.sum(state.family.logpdf(state.y, theta)))
    if not np.isfinite(ll):
        return None
    return {"param": k, "leaf": leaf, "omega": omega, "beta": beta, "loglik": ll}


def _resolve_features(family, columns, config):
    feats = {}
    for k, name in enumerate(family.param_names):
        if k in family.fixed:
            continue
        wanted = config.features.get(name) if config.features else None
        if wanted is None:
            feats[k] = list(range(len(columns)))
        else:
            missing = [c for c in wanted if c not in columns]
            if missing:
                raise StructureError(f"unknown feature columns for {name}: {missing}")
            feats[k] = [columns.index(c) for c in wanted]
    return feats


def fit(data, family, config=None):
    """Grow one adaptive soft tree per distribution parameter."""
    family = get_family(family)
    config = config or FitConfig()
    y = family.check_y(data.y)
    X = np.asarray(data.X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise DomainError("features must be finite")
    n = y.size
    if n <= family.n_params:
        raise FitError(f"need more than {family.n_params} observations, got {n}")
    rng = np.random.default_rng(config.seed)
    feats = _resolve_features(family, data.columns, config)
    std = Standardizer.fit(X, config.standardize)
    Xs = std(X)

    theta0 = fit_intercept_only(family, y)
    eta0 = [float(e) for e in family.eta_from_theta(theta0)]
    trees = {k: SoftTree(features=f, beta=np.array([eta0[k]])) for k, f in feats.items()}
    Xa = {k: augment(Xs[:, f]) for k, f in feats.items()}
    fixed = {k: eta0[k] for k in range(family.n_params) if k not in trees}
    state = _GrowState(family, y, Xa, trees, fixed, config.max_nodes)

    ll = state.loglik()
    if not np.isfinite(ll):
        raise FitError(f"non-finite log-likelihood at the intercept-only start ({family.name})")

    def df():
        return sum(t.n_coef for t in trees.values()) + len(fixed)

    ic = information_criterion(ll, df(), n, config.criterion)
    trace = [{"step": 0, "iteration": 0, "param": None, "node": None, "loglik": ll, "df": df(),
              "criterion": ic, "accepted": True}]

    def accept(iteration, prop):
        nonlocal ll, ic
        k = prop["param"]
        state.split(k, prop["leaf"], prop["omega"], prop["beta"])
        ll_split = state.loglik()
        cfg = config.shrinkage_for(family.param_names[k])
        if config.refine != "none":
            refine_all_gates(state, k, cfg, mode=config.refine, row_tol=config.row_tol)
        _update_fixed(state)
        ll = state.loglik()
        ic = information_criterion(ll, df(), n, config.criterion)
        trace.append({"step": len(trace), "iteration": iteration, "param": family.param_names[k],
                      "node": prop["leaf"], "loglik_split": ll_split, "loglik": ll, "df": df(),
                      "criterion": ic, "accepted": True})
        log.debug("iter %d: split %s node %d, loglik %.6f, %s %.4f", iteration, family.param_names[k],
                  prop["leaf"], ll, config.criterion, ic)

    order = sorted(trees)
    stop_reason = "max_iter"
    for iteration in range(1, config.max_iter + 1):
        accepted_any = False
        rejected = []
        if config.growth == "per_param":
            for k in order:
                prop = _best_split(state, k, config, rng)
                if prop is None:
                    continue
                new_ic = information_criterion(prop["loglik"], df() + 2, n, config.criterion)
                if new_ic < ic:
                    accept(iteration, prop)
                    accepted_any = True
                else:
                    rejected.append((new_ic, prop))
        else:
            props = [p for p in (_best_split(state, k, config, rng) for k in order) if p is not None]
            scored = sorted(((information_criterion(p["loglik"], df() + 2, n, config.criterion), i, p)
                             for i, p in enumerate(props)), key=lambda t: (t[0], t[1]))
            if scored and scored[0][0] < ic:
                accept(iteration, scored[0][2])
                accepted_any = True
            else:
                rejected = [(s[0], s[2]) for s in scored]
        if not accepted_any:
            if rejected:
                new_ic, prop = min(rejected, key=lambda t: t[0])
                trace.append({"step": len(trace), "iteration": iteration,
                              "param": family.param_names[prop["param"]], "node": prop["leaf"],
                              "loglik": prop["loglik"], "df": df() + 2, "criterion": new_ic,
                              "accepted": False})
                stop_reason = "criterion"
            else:
                log.warning("fit: no admissible candidate split, stopping")
                stop_reason = "no_candidates"
            break

    model = DistModel(
        family=family,
        columns=list(data.columns),
        standardizer=std,
        trees=trees,
        fixed_params=dict(state.eta_fixed),
        config=config,
    )
    final_ll = float(np.sum(family.logpdf(y, predict(model, X))))
    model.fit_report = {
        "n": int(n),
        "criterion": config.criterion,
        "trace": trace,
        "stop_reason": stop_reason,
        "loglik": final_ll,
        "df": model.df,
        "criterion_value": information_criterion(final_ll, model.df, n, config.criterion),
    }
    return model


# --- prediction --------------------------------------------------------------


def _check_X(model, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(model.columns):
        raise StructureError(f"model expects {len(model.columns)} feature columns, got {X.shape[1]}")
    return X


def predict_eta(model, X):
    """Linear predictors (one array per parameter) for new rows."""
    X = _check_X(model, X)
    Xs = model.standardizer(X)
    out = []
    for k in range(model.family.n_params):
        if k in model.trees:
            tree = model.trees[k]
            out.append(tree.eta(augment(Xs[:, tree.features])))
        else:
            out.append(np.full(X.shape[0], float(model.fixed_params[k])))
    return out


def predict(model, X):
    """Natural-scale distribution parameters for every row of ``X``."""
    return model.family.theta_from_eta(predict_eta(model, X))
