"""Bagged ensembles of distributional soft trees."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed

from .families import get_family
from .tree import FitConfig, FitError, StructureError, fit, predict_eta


@dataclass
class ForestModel:
    members: list
    bag_fraction: float
    n_trees: int
    seed: int
    subsamples: list

    @property
    def family(self):
        return self.members[0].family


def bag_indices(n, n_trees, bag_fraction, seed):
    """Sorted row subsets (without replacement), one per member."""
    if not 0 < bag_fraction <= 1:
        raise ValueError("bag_fraction must lie in (0, 1]")
    size = math.ceil(bag_fraction * n)
    rng = np.random.default_rng(seed)
    return [np.sort(rng.choice(n, size=size, replace=False)) for _ in range(n_trees)]


def _fit_member(i, data, family, config, rows):
    try:
        return fit(data.subset(rows), family, config)
    except Exception as exc:
        raise FitError(f"forest member {i} failed: {exc}") from exc


def fit_forest(data, family, config=None, n_trees=100, bag_fraction=0.63, seed=0, n_jobs=1):
    """Fit ``n_trees`` members; member ``i`` uses seed ``seed + i``."""
    if n_trees < 1:
        raise ValueError("n_trees must be at least 1")
    family = get_family(family)
    config = config or FitConfig()
    subsamples = bag_indices(data.n, n_trees, bag_fraction, seed)
    jobs = (delayed(_fit_member)(i, data, family, replace(config, seed=seed + i), rows)
            for i, rows in enumerate(subsamples))
    members = Parallel(n_jobs=n_jobs)(jobs)
    return ForestModel(members, bag_fraction, n_trees, seed, subsamples)


def predict_forest_eta(forest, X):
    members = forest.members
    ref = members[0]
    for m in members[1:]:
        if m.family != ref.family or m.columns != ref.columns:
            raise StructureError("forest members disagree on family or feature layout")
    etas = [predict_eta(m, X) for m in members]
    K = ref.family.n_params
    # sorting before the sum makes the mean exactly invariant to member order
    return [np.mean(np.sort(np.stack([e[k] for e in etas]), axis=0), axis=0) for k in range(K)]


def predict_forest(forest, X):
    """Average member predictors on the link scale, then apply inverse links."""
    return forest.family.theta_from_eta(predict_forest_eta(forest, X))
