"""Parametric response families.

Every family works on the linked predictor scale: ``score`` and ``d2`` are the
first and second derivative of the log-density with respect to
``eta_k = h_k(theta_k)``; ``weight`` is the working weight used by the IWLS
update (either ``-d2`` or its expectation, see ``Family.weight_kind``).

All methods take ``theta`` as a sequence of arrays on the natural scale in the
order ``(mu, sigma[, nu])`` and broadcast against ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "Link",
    "Family",
    "FAMILIES",
    "get_family",
    "log_density",
    "score",
    "working_weight",
    "cdf",
    "quantile",
    "sample",
    "fit_intercept_only",
]

LOG_2PI = math.log(2.0 * math.pi)
# Fisher information of log-scale for the (minimum) Gumbel: (1 - gamma)^2 + pi^2 / 6
GUMBEL_SIGMA_FISHER = (1.0 - np.euler_gamma) ** 2 + np.pi**2 / 6.0
ETA_CLIP = 30.0


class DomainError(ValueError):
    """Response or parameter outside the family's support."""


@dataclass(frozen=True)
class Link:
    kind: str

    def __post_init__(self):
        if self.kind not in ("identity", "log"):
            raise ValueError(f"unknown link {self.kind!r}")

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta if self.kind == "identity" else np.log(theta)

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            return eta
        return np.exp(np.clip(eta, -ETA_CLIP, ETA_CLIP))


IDENTITY = Link("identity")
LOG = Link("log")


class Family:
    """Base class; subclasses fill in the analytic pieces."""

    name = ""
    param_names: tuple = ()
    links: tuple = ()
    weight_kind: tuple = ()
    positive: tuple = ()  # which parameters must be > 0
    discrete = False
    # parameters fitted as intercept-only (no tree)
    fixed: tuple = ()

    @property
    def n_params(self):
        return len(self.param_names)

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return isinstance(other, Family) and other.name == self.name

    def __hash__(self):
        return hash(self.name)

    def theta_from_eta(self, eta):
        return [link.inverse(e) for link, e in zip(self.links, eta)]

    def eta_from_theta(self, theta):
        return [link(t) for link, t in zip(self.links, theta)]

    # --- validation -------------------------------------------------------
    def check_theta(self, theta):
        if len(theta) != self.n_params:
            raise DomainError(f"{self.name} expects {self.n_params} parameters, got {len(theta)}")
        for name, pos, t in zip(self.param_names, self.positive, theta):
            t = np.asarray(t, dtype=float)
            if not np.all(np.isfinite(t)):
                raise DomainError(f"{self.name}: non-finite {name}")
            if pos and np.any(t <= 0):
                raise DomainError(f"{self.name}: {name} must be positive")

    def check_y(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError(f"{self.name}: non-finite response")
        return y

    # --- interface --------------------------------------------------------
    def logpdf(self, y, theta):
        raise NotImplementedError

    def score(self, y, theta, k):
        raise NotImplementedError

    def d2(self, y, theta, k):
        raise NotImplementedError

    def weight(self, y, theta, k):
        if self.weight_kind[k] == "observed":
            return -self.d2(y, theta, k)
        return self.fisher(y, theta, k)

    def fisher(self, y, theta, k):
        raise NotImplementedError

    def cdf(self, y, theta):
        raise NotImplementedError

    def quantile(self, p, theta):
        raise NotImplementedError

    def sample(self, theta, rng, size=None):
        raise NotImplementedError

    def start(self, y):
        """Moment-based starting values for the intercept-only fit."""
        raise NotImplementedError

    def support_window(self, theta, tail=1e-12):
        lo = self.quantile(tail, theta)
        hi = self.quantile(1.0 - tail, theta)
        return lo, hi


class Normal(Family):
    name = "NO"
    param_names = ("mu", "sigma")
    links = (IDENTITY, LOG)
    weight_kind = ("observed", "fisher")
    positive = (False, True)

    def logpdf(self, y, theta):
        mu, sigma = theta
        z = (y - mu) / sigma
        return -np.log(sigma) - 0.5 * LOG_2PI - 0.5 * z * z

    def score(self, y, theta, k):
        mu, sigma = theta
        if k == 0:
            return (y - mu) / sigma**2
        z = (y - mu) / sigma
        return z * z - 1.0

    def d2(self, y, theta, k):
        mu, sigma = theta
        if k == 0:
            return np.broadcast_to(-1.0 / sigma**2, np.broadcast(y, sigma).shape).astype(float)
        z = (y - mu) / sigma
        return -2.0 * z * z

    def fisher(self, y, theta, k):
        mu, sigma = theta
        shape = np.broadcast(y, mu, sigma).shape
        if k == 0:
            return np.broadcast_to(1.0 / sigma**2, shape).astype(float)
        return np.full(shape, 2.0)

    def cdf(self, y, theta):
        mu, sigma = theta
        return special.ndtr((y - mu) / sigma)

    def quantile(self, p, theta):
        mu, sigma = theta
        return mu + sigma * special.ndtri(p)

    def sample(self, theta, rng, size=None):
        mu, sigma = theta
        return rng.normal(mu, sigma, size=size)

    def start(self, y):
        return [float(np.mean(y)), float(max(np.std(y), 1e-8))]


class Gumbel(Family):
    """Gumbel for minima: ``f(y) = exp(z - exp(z)) / sigma``, ``z = (y - mu) / sigma``."""

    name = "GU"
    param_names = ("mu", "sigma")
    links = (IDENTITY, LOG)
    weight_kind = ("observed", "fisher")
    positive = (False, True)

    def logpdf(self, y, theta):
        mu, sigma = theta
        z = (y - mu) / sigma
        return -np.log(sigma) + z - np.exp(z)

    def score(self, y, theta, k):
        mu, sigma = theta
        z = (y - mu) / sigma
        ez = np.exp(z)
        if k == 0:
            return (ez - 1.0) / sigma
        return -1.0 - z + z * ez

    def d2(self, y, theta, k):
        mu, sigma = theta
        z = (y - mu) / sigma
        ez = np.exp(z)
        if k == 0:
            return -ez / sigma**2
        return z - z * ez - z * z * ez

    def fisher(self, y, theta, k):
        mu, sigma = theta
        shape = np.broadcast(y, mu, sigma).shape
        if k == 0:
            return np.broadcast_to(1.0 / sigma**2, shape).astype(float)
        return np.full(shape, GUMBEL_SIGMA_FISHER)

    def cdf(self, y, theta):
        mu, sigma = theta
        return -np.expm1(-np.exp((y - mu) / sigma))

    def quantile(self, p, theta):
        mu, sigma = theta
        return mu + sigma * np.log(-np.log1p(-np.asarray(p, dtype=float)))

    def sample(self, theta, rng, size=None):
        mu, sigma = theta
        shape = size if size is not None else np.broadcast(mu, sigma).shape
        return self.quantile(rng.uniform(size=shape), theta)

    def start(self, y):
        sigma = max(np.std(y) * math.sqrt(6.0) / math.pi, 1e-8)
        return [float(np.mean(y) + np.euler_gamma * sigma), float(sigma)]


class NegBinomial(Family):
    """Negative binomial type I: mean ``mu``, variance ``mu + sigma * mu**2``."""

    name = "NBI"
    param_names = ("mu", "sigma")
    links = (LOG, LOG)
    weight_kind = ("observed", "fisher")
    positive = (True, True)
    discrete = True

    def check_y(self, y):
        y = super().check_y(y)
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise DomainError("NBI: response must be a non-negative integer")
        return y

    def logpdf(self, y, theta):
        mu, sigma = theta
        a = 1.0 / sigma
        sm = sigma * mu
        return (
            special.gammaln(y + a)
            - special.gammaln(a)
            - special.gammaln(y + 1.0)
            + y * np.log(sm)
            - (y + a) * np.log1p(sm)
        )

    def score(self, y, theta, k):
        mu, sigma = theta
        sm = sigma * mu
        resid = (y - mu) / (1.0 + sm)
        if k == 0:
            return resid
        a = 1.0 / sigma
        return a * (np.log1p(sm) - special.digamma(y + a) + special.digamma(a)) + resid

    def d2(self, y, theta, k):
        mu, sigma = theta
        sm = sigma * mu
        if k == 0:
            return -mu * (1.0 + sigma * y) / (1.0 + sm) ** 2
        a = 1.0 / sigma
        big_l = np.log1p(sm) - special.digamma(y + a) + special.digamma(a)
        return (
            -a * big_l
            + a * sm / (1.0 + sm)
            + a * a * (special.polygamma(1, y + a) - special.polygamma(1, a))
            - (y - mu) * sm / (1.0 + sm) ** 2
        )

    def fisher(self, y, theta, k):
        mu, sigma = np.broadcast_arrays(*[np.asarray(t, dtype=float) for t in theta])
        shape = np.broadcast(y, mu).shape
        mu = np.broadcast_to(mu, shape).ravel()
        sigma = np.broadcast_to(sigma, shape).ravel()
        sm = sigma * mu
        if k == 0:
            return (mu / (1.0 + sm)).reshape(shape)
        # a^2 * sum_j P(Y > j) / (a + j)^2 - a * sm / (1 + sm), using
        # trigamma(a) - trigamma(a + y) = sum_{j < y} 1 / (a + j)^2
        a = 1.0 / sigma
        q = sm / (1.0 + sm)
        pmf = np.exp(-a * np.log1p(sm))
        surv = 1.0 - pmf
        acc = np.zeros_like(a)
        j = 0
        while True:
            acc += surv / (a + j) ** 2
            pmf = pmf * (j + a) / (j + 1.0) * q
            surv = surv - pmf
            j += 1
            if j > 20 and np.all(surv < 1e-13):
                break
            if j > 100000:
                break
        # exact value is >= 0 but vanishes like (sigma mu)^2 / 2; cancellation can dip below
        return np.maximum(a * a * acc - a * q, 0.0).reshape(shape)

    def _pmf_table(self, mu, sigma, ymax):
        # rows: observations, columns: 0..ymax
        j = np.arange(int(ymax) + 1, dtype=float)
        logp = self.logpdf(j[None, :], (mu[:, None], sigma[:, None]))
        return np.exp(logp)

    def cdf(self, y, theta):
        mu, sigma = theta
        y, mu, sigma = np.broadcast_arrays(
            np.asarray(y, dtype=float), np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
        )
        shape = y.shape
        y, mu, sigma = y.ravel(), mu.ravel(), sigma.ravel()
        out = np.zeros_like(y)
        ok = y >= 0
        if np.any(ok):
            yf = np.floor(y[ok])
            cum = np.cumsum(self._pmf_table(mu[ok], sigma[ok], yf.max()), axis=1)
            out[ok] = np.minimum(cum[np.arange(yf.size), yf.astype(int)], 1.0)
        return out.reshape(shape)

    def quantile(self, p, theta):
        mu, sigma = theta
        p, mu, sigma = np.broadcast_arrays(
            np.asarray(p, dtype=float), np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
        )
        shape = p.shape
        p, mu, sigma = p.ravel(), mu.ravel(), sigma.ravel()
        out = np.empty_like(p)
        ymax = 16
        todo = np.arange(p.size)
        while todo.size:
            cum = np.cumsum(self._pmf_table(mu[todo], sigma[todo], ymax), axis=1)
            hit = cum[:, -1] >= p[todo]
            idx = np.argmax(cum >= p[todo, None], axis=1)
            out[todo[hit]] = idx[hit]
            todo = todo[~hit]
            ymax *= 2
            if ymax > 2**24:
                out[todo] = np.inf
                break
        return out.reshape(shape)

    def sample(self, theta, rng, size=None):
        mu, sigma = theta
        a = 1.0 / np.asarray(sigma, dtype=float)
        draws = rng.negative_binomial(a, 1.0 / (1.0 + sigma * np.asarray(mu, dtype=float)), size=size)
        return np.asarray(draws, dtype=float)

    def support_window(self, theta, tail=1e-12):
        return np.zeros_like(np.asarray(theta[0], dtype=float)), self.quantile(1.0 - tail, theta)

    def start(self, y):
        m = max(float(np.mean(y)), 1e-3)
        v = float(np.var(y))
        return [m, max((v - m) / m**2, 0.01)]


class Gamma(Family):
    """Gamma with mean ``mu`` and variance ``sigma**2 * mu**2``."""

    name = "GA"
    param_names = ("mu", "sigma")
    links = (LOG, LOG)
    weight_kind = ("observed", "fisher")
    positive = (True, True)

    def check_y(self, y):
        y = super().check_y(y)
        if np.any(y <= 0):
            raise DomainError("GA: response must be positive")
        return y

    def logpdf(self, y, theta):
        mu, sigma = theta
        a = 1.0 / sigma**2
        r = y / mu
        return a * np.log(a * r) - a * r - np.log(y) - special.gammaln(a)

    def score(self, y, theta, k):
        mu, sigma = theta
        a = 1.0 / sigma**2
        r = y / mu
        if k == 0:
            return a * (r - 1.0)
        return -2.0 * a * (np.log(a * r) + 1.0 - r - special.digamma(a))

    def d2(self, y, theta, k):
        mu, sigma = theta
        a = 1.0 / sigma**2
        r = y / mu
        if k == 0:
            return -a * r
        g = np.log(a * r) + 1.0 - r - special.digamma(a)
        return 4.0 * a * g + 4.0 * a - 4.0 * a * a * special.polygamma(1, a)

    def fisher(self, y, theta, k):
        mu, sigma = theta
        shape = np.broadcast(y, mu, sigma).shape
        a = 1.0 / np.asarray(sigma, dtype=float) ** 2
        if k == 0:
            return np.broadcast_to(a, shape).astype(float)
        return np.broadcast_to(4.0 * a * (a * special.polygamma(1, a) - 1.0), shape).astype(float)

    def cdf(self, y, theta):
        mu, sigma = theta
        a = 1.0 / sigma**2
        return special.gammainc(a, a * np.maximum(y, 0.0) / mu)

    def quantile(self, p, theta):
        mu, sigma = theta
        a = 1.0 / sigma**2
        return special.gammaincinv(a, p) * mu / a

    def sample(self, theta, rng, size=None):
        mu, sigma = theta
        a = 1.0 / np.asarray(sigma, dtype=float) ** 2
        return rng.gamma(a, np.asarray(mu, dtype=float) / a, size=size)

    def support_window(self, theta, tail=1e-9):
        return np.zeros_like(np.asarray(theta[0], dtype=float)), self.quantile(1.0 - tail, theta)

    def start(self, y):
        m = float(np.mean(y))
        return [m, float(max(np.std(y) / m, 1e-3))]


class StudentT(Family):
    """Location-scale t; ``nu`` (degrees of freedom) is fitted intercept-only."""

    name = "TF"
    param_names = ("mu", "sigma", "nu")
    links = (IDENTITY, LOG, LOG)
    weight_kind = ("fisher", "fisher", "fisher")
    positive = (False, True, True)
    fixed = (2,)

    def logpdf(self, y, theta):
        mu, sigma, nu = theta
        z = (y - mu) / sigma
        return (
            special.gammaln(0.5 * (nu + 1.0))
            - special.gammaln(0.5 * nu)
            - 0.5 * np.log(np.pi * nu)
            - np.log(sigma)
            - 0.5 * (nu + 1.0) * np.log1p(z * z / nu)
        )

    def score(self, y, theta, k):
        mu, sigma, nu = theta
        z = (y - mu) / sigma
        z2 = z * z
        if k == 0:
            return (nu + 1.0) * z / (sigma * (nu + z2))
        if k == 1:
            return -1.0 + (nu + 1.0) * z2 / (nu + z2)
        d = 0.5 * (
            special.digamma(0.5 * (nu + 1.0))
            - special.digamma(0.5 * nu)
            - 1.0 / nu
            - np.log1p(z2 / nu)
            + (nu + 1.0) * z2 / (nu * (nu + z2))
        )
        return nu * d

    def d2(self, y, theta, k):
        mu, sigma, nu = theta
        z = (y - mu) / sigma
        z2 = z * z
        if k == 0:
            return (nu + 1.0) * (z2 - nu) / (sigma**2 * (nu + z2) ** 2)
        if k == 1:
            return -2.0 * nu * (nu + 1.0) * z2 / (nu + z2) ** 2
        d = 0.5 * (
            special.digamma(0.5 * (nu + 1.0))
            - special.digamma(0.5 * nu)
            - 1.0 / nu
            - np.log1p(z2 / nu)
            + (nu + 1.0) * z2 / (nu * (nu + z2))
        )
        dd = 0.5 * (
            0.5 * special.polygamma(1, 0.5 * (nu + 1.0))
            - 0.5 * special.polygamma(1, 0.5 * nu)
            + 1.0 / nu**2
            + z2 / (nu * (nu + z2))
            - z2 * (nu * nu + 2.0 * nu + z2) / (nu**2 * (nu + z2) ** 2)
        )
        return nu * d + nu * nu * dd

    def fisher(self, y, theta, k):
        mu, sigma, nu = theta
        shape = np.broadcast(y, mu, sigma, nu).shape
        nu = np.asarray(nu, dtype=float)
        if k == 0:
            w = (nu + 1.0) / ((nu + 3.0) * np.asarray(sigma, dtype=float) ** 2)
        elif k == 1:
            w = 2.0 * nu / (nu + 3.0)
        else:
            info = 0.25 * (special.polygamma(1, 0.5 * nu) - special.polygamma(1, 0.5 * (nu + 1.0))) - (
                nu + 5.0
            ) / (2.0 * nu * (nu + 1.0) * (nu + 3.0))
            w = nu * nu * info
        return np.broadcast_to(w, shape).astype(float)

    def cdf(self, y, theta):
        mu, sigma, nu = theta
        return special.stdtr(nu, (y - mu) / sigma)

    def quantile(self, p, theta):
        mu, sigma, nu = theta
        return mu + sigma * special.stdtrit(nu, p)

    def sample(self, theta, rng, size=None):
        mu, sigma, nu = theta
        shape = size if size is not None else np.broadcast(mu, sigma, nu).shape
        return mu + sigma * rng.standard_t(nu, size=shape)

    def start(self, y):
        med = float(np.median(y))
        mad = float(np.median(np.abs(y - med))) * 1.4826
        return [med, max(mad, 1e-8), 10.0]


FAMILIES = {f.name: f for f in (Normal(), Gumbel(), NegBinomial(), Gamma(), StudentT())}


def get_family(code):
    if isinstance(code, Family):
        return code
    try:
        return FAMILIES[str(code).upper()]
    except KeyError:
        raise ValueError(f"unknown family {code!r}; choose from {sorted(FAMILIES)}") from None


# --- validated functional interface ------------------------------------------


def _prepare(family, y, theta):
    family = get_family(family)
    theta = [np.asarray(t, dtype=float) for t in theta]
    family.check_theta(theta)
    return family, family.check_y(y), theta


def log_density(family, y, theta):
    family, y, theta = _prepare(family, y, theta)
    return family.logpdf(y, theta)


def score(family, y, theta, k):
    family, y, theta = _prepare(family, y, theta)
    return family.score(y, theta, k)


def working_weight(family, y, theta, k):
    family, y, theta = _prepare(family, y, theta)
    return family.weight(y, theta, k)


def cdf(family, y, theta):
    family = get_family(family)
    theta = [np.asarray(t, dtype=float) for t in theta]
    family.check_theta(theta)
    return family.cdf(np.asarray(y, dtype=float), theta)


def quantile(family, p, theta):
    family = get_family(family)
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError("quantile level must lie in (0, 1)")
    theta = [np.asarray(t, dtype=float) for t in theta]
    family.check_theta(theta)
    return family.quantile(p, theta)


def sample(family, theta, rng, size=None):
    family = get_family(family)
    theta = [np.asarray(t, dtype=float) for t in theta]
    family.check_theta(theta)
    return family.sample(theta, rng, size=size)


def fit_intercept_only(family, y, max_iter=500, tol=1e-9):
    """Maximum-likelihood constant parameters (natural scale).

    Cycles one-dimensional Fisher-scoring steps over the parameters with
    step halving until every mean score is below ``tol`` or a full sweep
    stops improving the log-likelihood.
    """
    family = get_family(family)
    y = family.check_y(y)
    n = y.size
    eta = [float(e) for e in family.eta_from_theta(family.start(y))]

    def ll(eta_):
        return float(np.sum(family.logpdf(y, family.theta_from_eta(eta_))))

    cur = ll(eta)
    if not np.isfinite(cur):
        raise DomainError(f"{family.name}: non-finite log-likelihood at start values")
    for _ in range(max_iter):
        worst = 0.0
        before = cur
        for k in range(family.n_params):
            theta = family.theta_from_eta(eta)
            u = float(np.sum(family.score(y, theta, k)))
            w = float(np.sum(family.weight(y, theta, k)))
            worst = max(worst, abs(u) / n)
            if w <= 0 or not np.isfinite(w):
                w = abs(u) + 1.0
            step = u / w
            for _ in range(40):
                trial = list(eta)
                trial[k] += step
                new = ll(trial)
                if np.isfinite(new) and new >= cur:
                    eta, cur = trial, new
                    break
                step *= 0.5
        if worst < tol or cur - before <= 1e-14 * abs(before):
            break
    return [float(t) for t in family.theta_from_eta(eta)]
