"""Simulation designs: scaled Friedman predictors and two toy surfaces."""

from __future__ import annotations

import logging

import numpy as np

from .families import get_family
from .tree import Dataset

log = logging.getLogger(__name__)

X_COLUMNS = ["x1", "x2", "x3", "x4", "x5"]
Z_COLUMNS = ["z1", "z2", "z3", "z4"]
Z_RANGES = [(0.0, 100.0), (40.0, 560.0 * np.pi), (0.0, 1.0), (1.0, 11.0)]

# friedman 1 range before scaling: [0, 30] (10 + 5 + 10 + 5)
ETA_MU_BOUNDS = ((0.0 - 1.5) * 2.0 / 26.48 + 1.0, (30.0 - 1.5) * 2.0 / 26.48 + 1.0)


def friedman_predictors(x, z):
    """True ``(eta_mu, eta_sigma)`` for rows of ``x`` (n x 5) and ``z`` (n x 4)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if x.shape[1] != 5 or z.shape[1] != 4:
        raise ValueError("friedman_predictors needs 5 x-columns and 4 z-columns")
    if np.any((x < 0) | (x > 1)):
        log.warning("x outside [0, 1]")
    for j, (lo, hi) in enumerate(Z_RANGES):
        if np.any((z[:, j] < lo) | (z[:, j] > hi)):
            log.warning("z%d outside [%g, %g]", j + 1, lo, hi)
    x1, x2, x3, x4, x5 = x.T
    z1, z2, z3, z4 = z.T
    f1 = 10.0 * np.sin(np.pi * x1 * x2) + 20.0 * (x3 - 0.5) ** 2 + 10.0 * x4 + 5.0 * x5
    eta_mu = (f1 - 1.5) * (2.0 / 26.48) + 1.0
    radical = np.sqrt(z1**2 + (z2 * z3 - 1.0 / (z2 * z4)) ** 2)
    eta_sigma = (radical - 7.96) * (2.0 / 1736.85) - 2.5
    return eta_mu, eta_sigma


def draw_inputs(n, rng):
    x = rng.uniform(0.0, 1.0, size=(n, 5))
    z = np.column_stack([rng.uniform(lo, hi, size=n) for lo, hi in Z_RANGES])
    return x, z


def simulate_dataset(family, n, seed=0):
    """Friedman design with ``mu`` driven by x and ``sigma`` by z."""
    family = get_family(family)
    if family.name not in ("NO", "GU", "NBI"):
        raise ValueError("the simulation design covers NO, GU and NBI")
    rng = np.random.default_rng(seed)
    x, z = draw_inputs(int(n), rng)
    eta_mu, eta_sigma = friedman_predictors(x, z)
    theta = family.theta_from_eta([eta_mu, eta_sigma])
    y = family.sample(theta, rng)
    return Dataset(
        np.hstack([x, z]),
        y,
        X_COLUMNS + Z_COLUMNS,
        {"eta_mu_true": eta_mu, "eta_sigma_true": eta_sigma},
    )


def sine2d_truth(x, z):
    return np.sin(x) * np.sin(z)


def step_oscillation_truth(x):
    on = (np.asarray(x) > -1.0).astype(float)
    return on * 1.5 + 0.4 * np.sin(6.0 * np.asarray(x)) * on


def toy_surfaces(kind, n=None, noise_sd=None, seed=0):
    """Toy data with the noise-free truth stored as ``extra["f_true"]``.

    ``sine2d``: ``sin(x) sin(z)`` on an equidistant ``m x m`` grid over
    ``[-pi/2, pi/2]^2`` with ``m = round(sqrt(n))`` (default 100 x 100, noise 0.1).
    ``step_oscillation``: a jump of 1.5 at ``x = -1`` followed by
    ``0.4 sin(6x)``, ``x`` equidistant on ``[-5, 5]`` (default n 500, noise 0.05).
    """
    rng = np.random.default_rng(seed)
    if kind == "sine2d":
        n = 10_000 if n is None else int(n)
        noise_sd = 0.1 if noise_sd is None else noise_sd
        m = int(round(np.sqrt(n)))
        grid = np.linspace(-np.pi / 2, np.pi / 2, m)
        gx, gz = np.meshgrid(grid, grid, indexing="ij")
        X = np.column_stack([gx.ravel(), gz.ravel()])
        f = sine2d_truth(X[:, 0], X[:, 1])
        columns = ["x", "z"]
    elif kind == "step_oscillation":
        n = 500 if n is None else int(n)
        noise_sd = 0.05 if noise_sd is None else noise_sd
        X = np.linspace(-5.0, 5.0, n)[:, None]
        f = step_oscillation_truth(X[:, 0])
        columns = ["x"]
    else:
        raise ValueError(f"unknown toy surface {kind!r}")
    y = f + rng.normal(0.0, noise_sd, size=f.size)
    return Dataset(X, y, columns, {"f_true": f})
