"""Penalized estimation of gate weights and the ridge-stabilized coefficient step."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .gating import sigmoid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShrinkageConfig:
    """Per-parameter optimizer settings.

    ``lam`` is the ridge penalty on gate weights (``lam * omega @ omega``);
    ``ridge_zeta`` only stabilizes the coefficient solve.
    """

    lam: float = 10.0
    ridge_zeta: float = 1e-5
    max_inner_iters: int = 100
    grad_tol: float = 1e-6
    penalize_bias: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.ridge_zeta <= 0:
            raise ValueError("ridge_zeta must be positive")


WELL_CONDITIONED = 1e4


def _refined_solve(N_c, u, w, zeta, steps):
    # near-collinear columns make the system conditioned like 1/zeta; accumulate
    # the cross-products in extended precision and refine the double solve
    Nl = N_c.astype(np.longdouble)
    A_ext = Nl.T @ (w.astype(np.longdouble)[:, None] * Nl)
    A_ext[np.diag_indices_from(A_ext)] += zeta
    b_ext = Nl.T @ u.astype(np.longdouble)
    factor = linalg.cho_factor(A_ext.astype(float), lower=True)
    beta = linalg.cho_solve(factor, b_ext.astype(float))
    for _ in range(steps):
        r = b_ext - A_ext @ beta.astype(np.longdouble)
        beta = beta + linalg.cho_solve(factor, r.astype(float))
    return beta


def iwls_update(N_c, u, w, zeta=1e-5, refine_steps=2):
    """Solve ``(N_c' W N_c + zeta I) beta = N_c' u`` for the block coefficients.

    Ill-conditioned systems (condition number above ``WELL_CONDITIONED``) are
    solved with extended-precision cross-products plus ``refine_steps`` rounds
    of iterative refinement. Returns a zero vector (and
    logs a warning) if the system is numerically singular even with the ridge.
    """
    N_c = np.asarray(N_c, dtype=float)
    if N_c.ndim == 1:
        N_c = N_c[:, None]
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("working weights must be non-negative")
    A = N_c.T @ (w[:, None] * N_c)
    A[np.diag_indices_from(A)] += zeta
    b = N_c.T @ u
    try:
        ev = linalg.eigvalsh(A)
        well_conditioned = ev[0] > 0 and ev[-1] < WELL_CONDITIONED * ev[0]
        if well_conditioned:
            beta = linalg.cho_solve(linalg.cho_factor(A, lower=True), b)
        else:
            beta = _refined_solve(N_c, u, w, zeta, refine_steps)
    except (linalg.LinAlgError, ValueError):
        log.warning("iwls_update: singular system, returning zero update")
        return np.zeros(N_c.shape[1])
    if not np.all(np.isfinite(beta)):
        log.warning("iwls_update: non-finite solution, returning zero update")
        return np.zeros(N_c.shape[1])
    return beta


class GateObjective:
    """Log-likelihood as a function of one gate's weights.

    The linear predictor of parameter ``k`` is ``eta(omega) = a + c * p(omega)``
    with ``p`` the logistic gate; everything else is held fixed. Calling the
    object returns ``loglik`` or ``(loglik, grad, hess)``.
    """

    def __init__(self, family, y, theta, k, Xa, a, c):
        self.family = family
        self.y = y
        self.theta = list(theta)
        self.k = k
        self.Xa = Xa
        self.a = a
        self.c = c
        self.link = family.links[k]

    def _theta(self, eta):
        th = list(self.theta)
        th[self.k] = self.link.inverse(eta)
        return th

    def __call__(self, omega, derivs=True):
        p = sigmoid(self.Xa @ omega)
        eta = self.a + self.c * p
        th = self._theta(eta)
        with np.errstate(all="ignore"):
            ll = float(np.sum(self.family.logpdf(self.y, th)))
        if not derivs:
            return ll
        u = self.family.score(self.y, th, self.k)
        d2 = self.family.d2(self.y, th, self.k)
        s = p * (1.0 - p)
        deta = self.c * s
        grad = self.Xa.T @ (u * deta)
        h = d2 * deta * deta + u * deta * (1.0 - 2.0 * p)
        hess = self.Xa.T @ (h[:, None] * self.Xa)
        return ll, grad, hess


def _penalty_mask(size, cfg):
    mask = np.ones(size)
    if not cfg.penalize_bias:
        mask[0] = 0.0
    return mask


def penalized_value(objective, omega, cfg):
    mask = _penalty_mask(omega.size, cfg)
    return objective(omega, derivs=False) - cfg.lam * float(np.sum(mask * omega * omega))


def _ascent_direction(g, H):
    """Newton direction if ``H`` is negative definite, else an eigen-shifted one."""
    try:
        c = linalg.cho_factor(-H, lower=True)
        return linalg.cho_solve(c, g), "newton"
    except linalg.LinAlgError:
        pass
    try:
        vals, vecs = linalg.eigh(-H)
    except (linalg.LinAlgError, ValueError):
        return g, "gradient"
    if not np.all(np.isfinite(vals)):
        return g, "gradient"
    shift = max(0.0, -vals.min()) + 1e-3 * max(1.0, float(np.abs(vals).max()))
    d = vecs @ ((vecs.T @ g) / (vals + shift))
    return d, "shifted"


def optimize_gate(objective, omega_init, cfg):
    """Maximize ``objective(omega) - lam * |omega|^2`` from ``omega_init``.

    Damped Newton with Armijo backtracking; a non-negative-definite Hessian is
    eigen-shifted, and if no Newton-type step is admissible a backtracking
    gradient step is tried. Only strictly improving steps are accepted, so the
    result is never worse than the starting point.
    """
    omega = np.array(omega_init, dtype=float)
    mask = _penalty_mask(omega.size, cfg)
    lam = cfg.lam

    def evaluate(w):
        ll, g, H = objective(w)
        f = ll - lam * float(np.sum(mask * w * w))
        g = g - 2.0 * lam * mask * w
        H = H - 2.0 * lam * np.diag(mask)
        return f, g, H

    f, g, H = evaluate(omega)
    if not np.isfinite(f):
        return omega
    for _ in range(cfg.max_inner_iters):
        if not np.all(np.isfinite(g)) or np.linalg.norm(g) < cfg.grad_tol:
            break
        d, kind = _ascent_direction(g, H)
        accepted = False
        for direction in (d, g) if kind != "gradient" else (g,):
            slope = float(g @ direction)
            if slope <= 0:
                continue
            t = 1.0
            if direction is g:
                # gradient steps start at unit length in omega space
                t = 1.0 / max(1.0, float(np.linalg.norm(g)))
            for _ in range(50):
                trial = omega + t * direction
                f_new = penalized_value(objective, trial, cfg)
                if np.isfinite(f_new) and f_new > f and f_new >= f + 1e-4 * t * slope:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            break
        gain = f_new - f
        omega = trial
        f, g, H = evaluate(omega)
        if gain <= 1e-12 * max(1.0, abs(f)):
            break
    return omega


def _subtree_values(parent, side, beta, probs, n):
    """``G(v) = beta_v + p_v G(L_v) + (1 - p_v) G(R_v)`` for every node."""
    J = len(parent)
    kids = {}
    for j in range(1, J):
        kids.setdefault(parent[j], {})[side[j]] = j
    G = [None] * J
    for v in range(J - 1, -1, -1):
        if v in kids:
            p = probs[v]
            G[v] = beta[v] + p * G[kids[v]["L"]] + (1.0 - p) * G[kids[v]["R"]]
        else:
            G[v] = np.full(n, beta[v])
    return G, kids


def refine_all_gates(state, k, cfg, mode="all", row_tol=1e-12):
    """One pass of gate updates over tree ``k`` of a fit state.

    For every split node (creation order, or only the newest with
    ``mode="new_only"``) the gate is re-optimized with all coefficients fixed,
    then the node's two child coefficients get a ridge-stabilized IWLS step.
    Steps that would lower the penalized or the plain log-likelihood are
    discarded, so the pass is monotone in both. Returns the change in penalized log-likelihood.
    """
    tree = state.trees[k]
    splits = sorted(tree.omega)
    if not splits:
        return 0.0
    if mode == "new_only":
        splits = splits[-1:]
    fam = state.family
    mask_pen = lambda w: cfg.lam * float(np.sum(_penalty_mask(w.size, cfg) * w * w))  # noqa: E731
    start = state.loglik() - sum(mask_pen(w) for w in tree.omega.values())
    for r in splits:
        P = state.columns(k)
        probs = state.probs[k]
        G, kids = _subtree_values(tree.parent, tree.side, tree.beta, probs, state.n)
        left, right = kids[r]["L"], kids[r]["R"]
        c = P[:, r] * (G[left] - G[right])
        eta = state.eta[k]
        a = eta - c * probs[r]
        rows = np.flatnonzero(P[:, r] > row_tol)
        if rows.size == 0:
            continue
        theta = state.theta()
        obj = GateObjective(
            fam,
            state.y[rows],
            [t[rows] if np.ndim(t) else t for t in theta],
            k,
            state.Xa[k][rows],
            a[rows],
            c[rows],
        )
        old = tree.omega[r].copy()
        ll_old = state.loglik()
        new = optimize_gate(obj, old, cfg)
        if not np.array_equal(new, old):
            state.set_gate(k, r, new)
            ll_new = state.loglik()
            # keep the raw log-likelihood monotone too, so growth traces stay nested
            if ll_new < ll_old or ll_new - mask_pen(new) < ll_old - mask_pen(old):
                state.set_gate(k, r, old)
        # coefficient step for the two children of r
        ll_old = state.loglik()
        theta = state.theta()
        N_c = state.columns(k)[:, [left, right]]
        u = fam.score(state.y, theta, k)
        w = fam.weight(state.y, theta, k)
        step = iwls_update(N_c, u, w, cfg.ridge_zeta)
        for _ in range(30):
            if not np.any(step):
                break
            state.shift_beta(k, (left, right), step)
            if state.loglik() >= ll_old:
                break
            state.shift_beta(k, (left, right), -step)
            step = 0.5 * step
    end = state.loglik() - sum(mask_pen(w) for w in tree.omega.values())
    return end - start
