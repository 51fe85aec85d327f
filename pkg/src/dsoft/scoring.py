"""Proper scoring rules and predictor error metrics (lower is better)."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, special

from .families import get_family, log_density

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


class UnsupportedMetric(ValueError):
    pass


def log_score(family, y, theta):
    return -log_density(family, y, theta)


def crps_normal(y, mu, sigma):
    z = (np.asarray(y, dtype=float) - mu) / sigma
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return sigma * (z * (2.0 * special.ndtr(z) - 1.0) + 2.0 * pdf - INV_SQRT_PI)


BREAK_PROBS = (1e-6, 1e-3, 0.05, 0.25, 0.5, 0.75, 0.95, 0.999, 1.0 - 1e-6)


def crps_quadrature(cdf, y, lo, hi, tol=1e-6, breaks=()):
    """``int (F(t) - 1{t >= y})^2 dt`` over ``[lo, hi]`` for a scalar ``y``.

    The window is widened to contain ``y``; mass outside it is ignored.
    ``breaks`` (e.g. a few quantiles) split the range so that heavy-tailed
    windows spanning many orders of magnitude still resolve the bulk.
    """
    lo = min(lo, y)
    hi = max(hi, y)
    inner = sorted({float(b) for b in breaks if lo < b < hi and b != y})

    def piecewise(f, a, b):
        edges = [a] + [t for t in inner if a < t < b] + [b]
        return sum(integrate.quad(f, u, v, epsabs=tol, epsrel=1e-8, limit=200)[0]
                   for u, v in zip(edges, edges[1:]))

    left = right = 0.0
    if y > lo:
        left = piecewise(lambda t: cdf(t) ** 2, lo, y)
    if hi > y:
        right = piecewise(lambda t: (1.0 - cdf(t)) ** 2, y, hi)
    return left + right


def crps(family, y, theta, method="auto"):
    """CRPS of the predictive distribution(s) at ``y`` (arrays broadcast)."""
    family = get_family(family)
    if family.discrete:
        raise UnsupportedMetric(f"CRPS is not defined here for discrete family {family.name}; use log_score")
    theta = [np.asarray(t, dtype=float) for t in theta]
    family.check_theta(theta)
    y = np.asarray(y, dtype=float)
    if family.name == "NO" and method != "quadrature":
        return crps_normal(y, theta[0], theta[1])
    shape = np.broadcast(y, *theta).shape
    yb = np.broadcast_to(y, shape).ravel()
    tb = [np.broadcast_to(t, shape).ravel() for t in theta]
    lo, hi = family.support_window([np.asarray(t) for t in tb])
    lo = np.broadcast_to(lo, yb.shape)
    hi = np.broadcast_to(hi, yb.shape)
    qs = family.quantile(np.array(BREAK_PROBS)[:, None], [t[None, :] for t in tb])
    out = np.empty(yb.size)
    for i in range(yb.size):
        th = [t[i] for t in tb]
        out[i] = crps_quadrature(lambda t, th=th: family.cdf(t, th), yb[i], float(lo[i]), float(hi[i]),
                                 breaks=qs[:, i])
    return out.reshape(shape) if shape else float(out[0])


def crps_energy_mc(samples, y, rng=None):
    """Monte-Carlo CRPS ``E|Y - y| - E|Y - Y'| / 2`` and its standard error.

    The second term pairs the sample with a shuffled copy of itself.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    s = np.asarray(samples, dtype=float)
    s2 = rng.permutation(s)
    terms = np.abs(s - y) - 0.5 * np.abs(s - s2)
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(terms.size))


def predictor_rmse(eta_hat, eta_true):
    eta_hat = np.asarray(eta_hat, dtype=float)
    eta_true = np.asarray(eta_true, dtype=float)
    if eta_hat.shape != eta_true.shape:
        raise ValueError(f"length mismatch: {eta_hat.shape} vs {eta_true.shape}")
    return float(np.sqrt(np.mean((eta_hat - eta_true) ** 2)))


def mean_score(family, y, theta):
    """Mean CRPS for continuous families, mean log score for discrete ones."""
    family = get_family(family)
    if family.discrete:
        return float(np.mean(log_score(family, y, theta)))
    return float(np.mean(crps(family, y, theta)))
