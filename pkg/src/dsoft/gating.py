"""Logistic soft splits and the learned design matrix.

A gate's weight vector carries the bias first: ``omega = (w0, w1, ..., wq)``,
so gates are evaluated on the augmented feature matrix ``[1, X]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_CLAMP = 1e-15


class StructureError(ValueError):
    """Inconsistent tree topology or unknown node."""


@dataclass
class GateNode:
    omega: np.ndarray
    node_id: int

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        if not np.all(np.isfinite(self.omega)):
            raise ValueError("gate weights must be finite")


@dataclass
class TreePath:
    """Root-to-node walk: ``gates[i]`` is split with direction ``directions[i]`` (1 = left)."""

    gates: list
    directions: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.gates) != len(self.directions) or not self.gates:
            raise StructureError("path needs as many directions as gates (at least one)")


def sigmoid(t):
    t = np.asarray(t, dtype=float)
    # exp overflow is harmless here, the clamp absorbs it
    with np.errstate(over="ignore"):
        p = 1.0 / (1.0 + np.exp(-t))
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def augment(X):
    """Prepend the constant column used by gate biases."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def gate_prob(gate, x):
    """Probability of routing ``x`` (one row or an ``n x q`` matrix) to the left child."""
    omega = gate.omega if isinstance(gate, GateNode) else np.asarray(gate, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != omega.size - 1:
        raise StructureError(f"gate expects {omega.size - 1} features, got {x.shape[-1]}")
    return sigmoid(omega[0] + x @ omega[1:])


def _lookup(gates, node_id):
    try:
        gate = gates[node_id]
    except (KeyError, IndexError):
        raise StructureError(f"unknown gate node {node_id}") from None
    return gate


def path_prob(path, gates, x):
    prob = 1.0
    for node_id, d in zip(path.gates, path.directions):
        p = gate_prob(_lookup(gates, node_id), x)
        prob = prob * (p if d else 1.0 - p)
    return prob


def path_prob_grad(path, gates, x):
    """Gradient of ``path_prob`` for one row ``x`` w.r.t. every gate on the path.

    Returns a dict ``node_id -> d P / d omega``.
    """
    x = np.asarray(x, dtype=float)
    xa = np.concatenate([[1.0], x])
    prob = path_prob(path, gates, x)
    grads = {}
    for node_id, d in zip(path.gates, path.directions):
        p = gate_prob(_lookup(gates, node_id), x)
        dlog = (1.0 - p) if d else -p
        grads[node_id] = grads.get(node_id, 0.0) + prob * dlog * xa
    return grads


def path_to(node, parent, side):
    """The ``TreePath`` from the root to ``node`` given parent/side tables."""
    gates, dirs = [], []
    while node != 0:
        par = parent[node]
        if par < 0:
            raise StructureError(f"node {node} is detached from the root")
        gates.append(par)
        dirs.append(1 if side[node] == "L" else 0)
        node = par
    if not gates:
        raise StructureError("the root node has no path")
    return TreePath(gates[::-1], dirs[::-1])


def check_topology(parent, side, omega):
    n = len(parent)
    if n == 0 or parent[0] != -1:
        raise StructureError("node 0 must be the root")
    if len(side) != n:
        raise StructureError("parent and side tables differ in length")
    kids = {}
    for j in range(1, n):
        par = parent[j]
        if not 0 <= par < j:
            raise StructureError(f"node {j} has invalid parent {par}")
        if side[j] not in ("L", "R"):
            raise StructureError(f"node {j} has invalid side {side[j]!r}")
        kids.setdefault(par, []).append(side[j])
    for par, sides in kids.items():
        if sorted(sides) != ["L", "R"]:
            raise StructureError(f"node {par} must have exactly one left and one right child")
        if par not in omega:
            raise StructureError(f"split node {par} has no gate weights")
    for par in omega:
        if par not in kids:
            raise StructureError(f"gate {par} has no children")


def gate_matrix(omega, Xa):
    """Gate probabilities for every split node: dict ``node_id -> (n,)`` array."""
    return {node: sigmoid(Xa @ w) for node, w in omega.items()}


def design_matrix(parent, side, omega, Xa, probs=None):
    """Columns ``[1, P_1, ..., P_J]`` of path probabilities in node-id order.

    ``Xa`` is the augmented feature matrix; ``probs`` may pass precomputed
    gate probabilities.
    """
    check_topology(parent, side, omega)
    Xa = np.atleast_2d(np.asarray(Xa, dtype=float))
    if probs is None:
        probs = gate_matrix(omega, Xa)
    N = np.empty((Xa.shape[0], len(parent)))
    N[:, 0] = 1.0
    for j in range(1, len(parent)):
        par = parent[j]
        p = probs[par]
        N[:, j] = N[:, par] * (p if side[j] == "L" else 1.0 - p)
    return N
