"""Kernel attention at the leaf level and at the tree level.

Leaf level: inside the leaf reached by ``x``, member rows get Gaussian-kernel
(softmax of negative squared distance) weights ``mu``. The weighted member
mean is the tree's key ``A_k(x)`` and the weighted target mean its value
``B_k(x)``. Tree level: a softmax over trees of ``-||x - A_k(x)||^2 / tau_j``
for each of the ``M`` temperatures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from larf.data import Dataset
from larf.errors import DimensionMismatch, EmptyInput, NonpositiveTemperature, ValidationError
from larf.forest import Forest


def default_taus(M: int) -> tuple[float, ...]:
    """Powers of ten starting at ``10**-(M // 2)``; ``M = 1`` gives ``(1.0,)``."""
    if M < 1:
        raise ValidationError(f"M must be at least 1, got {M}")
    start = -(M // 2)
    return tuple(float(10.0**e) for e in range(start, start + M))


@dataclass(frozen=True)
class KernelParams:
    tau0: float = 1.0
    taus: tuple = (1.0,)

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "tau0", float(self.tau0))
        if not self.tau0 > 0:
            raise NonpositiveTemperature(f"tau0 must be positive, got {self.tau0}")
        if not taus:
            raise ValidationError("at least one tree-level temperature is required")
        if any(not t > 0 for t in taus):
            raise NonpositiveTemperature(f"tree-level temperatures must be positive, got {taus}")

    @property
    def M(self) -> int:
        return len(self.taus)

    @classmethod
    def with_default_taus(cls, tau0: float, M: int) -> "KernelParams":
        return cls(tau0, default_taus(M))


def _softmax_neg(dist: np.ndarray, tau, axis: int = -1) -> np.ndarray:
    # Shift before dividing: a tiny tau would otherwise overflow to -inf - -inf.
    with np.errstate(over="ignore"):
        z = -(dist - dist.min(axis=axis, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_neg_sq_dist(sq_distances, tau: float) -> np.ndarray:
    """Weights proportional to ``exp(-d_i / tau)``, normalized to sum to one."""
    d = np.asarray(sq_distances, dtype=float)
    if d.size == 0:
        raise EmptyInput("softmax over an empty set")
    if not tau > 0:
        raise NonpositiveTemperature(f"temperature must be positive, got {tau}")
    return _softmax_neg(d, tau)


def _sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def leaf_mu(x, members, data: Dataset, tau0: float) -> np.ndarray:
    members = np.asarray(members, dtype=int)
    if members.size == 0:
        raise EmptyInput("leaf has no members")
    x = np.asarray(x, dtype=float)
    d = ((data.features[members] - x) ** 2).sum(axis=1)
    return softmax_neg_sq_dist(d, tau0)


@dataclass(frozen=True)
class LeafKeyValue:
    key: np.ndarray
    value: float


def leaf_key_value(x, tree_index: int, forest: Forest, data: Dataset, tau0: float) -> LeafKeyValue:
    x = np.asarray(x, dtype=float)
    if x.shape != (forest.n_features,):
        raise DimensionMismatch(f"expected a vector of {forest.n_features} features, got shape {x.shape}")
    members = forest.leaf_members(tree_index, x)
    mu = leaf_mu(x, members, data, tau0)
    return LeafKeyValue(mu @ data.features[members], float(mu @ data.targets[members]))


@dataclass(frozen=True)
class AttentionFeatures:
    """Per-sample quantities feeding the attention QP.

    ``sigma[s, j, k]`` is the tree-level softmax at temperature ``taus[j]``,
    ``D[s, k] = B_k(x_s)`` and ``C[s, j, k] = D[s, k] * sigma[s, j, k]``.
    """

    C: np.ndarray
    D: np.ndarray
    sigma: np.ndarray
    key_sq_dist: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.D.shape[0]


def compute_keys_values(
    xs: np.ndarray, forest: Forest, data: Dataset, tau0: float, leaf_attention: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Squared key distances ``||x_s - A_k(x_s)||^2`` and values ``B_k(x_s)``, both (S, T)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] != forest.n_features:
        raise DimensionMismatch(f"expected {forest.n_features} features, got {xs.shape[1]}")
    X, y = data.features, data.targets
    S, T = xs.shape[0], forest.n_trees
    key_dist = np.empty((S, T))
    values = np.empty((S, T))
    leaves = forest.apply(xs)
    for k, tree in enumerate(forest.trees):
        col = leaves[:, k]
        if not leaf_attention:
            centroids = np.zeros((tree.n_nodes, X.shape[1]))
            for leaf, idx in tree.members.items():
                centroids[leaf] = X[idx].mean(axis=0)
            diff = xs - centroids[col]
            key_dist[:, k] = np.einsum("ij,ij->i", diff, diff)
            values[:, k] = tree.value[col]
            continue
        for leaf in np.unique(col):
            rows = np.flatnonzero(col == leaf)
            idx = tree.members[int(leaf)]
            Xj = X[idx]
            mu = _softmax_neg(_sq_dist(xs[rows], Xj), tau0)
            A = mu @ Xj
            diff = xs[rows] - A
            key_dist[rows, k] = np.einsum("ij,ij->i", diff, diff)
            values[rows, k] = mu @ y[idx]
    return key_dist, values


def tree_softmax(key_dist: np.ndarray, taus) -> np.ndarray:
    """Softmax over trees for each temperature, shape (S, M, T)."""
    taus = np.asarray(taus, dtype=float)
    return _softmax_neg(key_dist[:, None, :], taus[None, :, None], axis=2)


def compute_features(
    xs, forest: Forest, data: Dataset, kernel: KernelParams, leaf_attention: bool
) -> AttentionFeatures:
    """Build ``C``, ``D`` and the tree-level softmax for every row of ``xs``.

    ``data`` is the (standardized) training set the forest was grown on. With
    ``leaf_attention`` off, keys and values are plain leaf centroids and means.
    """
    key_dist, D = compute_keys_values(xs, forest, data, kernel.tau0, leaf_attention)
    sigma = tree_softmax(key_dist, kernel.taus)
    C = D[:, None, :] * sigma
    return AttentionFeatures(C=C, D=D, sigma=sigma, key_sq_dist=key_dist)
