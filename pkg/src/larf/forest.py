"""Bagged regression-tree ensembles (random forest and extremely randomized trees).

Trees are grown on a bootstrap sample with the variance-reduction criterion.
Once a tree is grown, every training row is routed through it so each leaf
stores the full set of training rows that reach it; these member sets back
the leaf-level attention.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from larf.data import Dataset
from larf.errors import DimensionMismatch, EmptyDataset, InvalidConfig, ValidationError

FOREST_FORMAT = "larf-forest"
FOREST_VERSION = 1

_LEAF = -1


class ForestKind(str, Enum):
    RF = "RF"
    ERT = "ERT"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    kind: ForestKind = ForestKind.RF
    min_leaf_size: int = 10
    max_depth: Optional[int] = None
    features_per_split: Union[int, str] = "all"
    rng_seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ForestKind(self.kind))
        except ValueError:
            raise InvalidConfig(f"unknown forest kind {self.kind!r}") from None
        if self.n_trees < 1:
            raise InvalidConfig(f"n_trees must be positive, got {self.n_trees}")
        if self.min_leaf_size < 1:
            raise InvalidConfig(f"min_leaf_size must be positive, got {self.min_leaf_size}")
        if self.max_depth is not None and self.max_depth < 0:
            raise InvalidConfig(f"max_depth must be nonnegative, got {self.max_depth}")
        fps = self.features_per_split
        if fps != "all" and not (isinstance(fps, int) and fps >= 1):
            raise InvalidConfig(f"features_per_split must be 'all' or a positive int, got {fps!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf.

    ``members`` maps each leaf's node index to the sorted training rows it holds.
    Rows with ``x[feature] <= threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    members: dict

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def leaves(self) -> list[int]:
        return sorted(self.members)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] != _LEAF
        while active.any():
            idx = rows[active]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] != _LEAF
        return node

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "members": [[leaf, self.members[leaf].tolist()] for leaf in self.leaves],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float),
            members={int(leaf): np.asarray(idx, dtype=np.int64) for leaf, idx in d["members"]},
        )


@dataclass(frozen=True)
class Forest:
    trees: tuple
    config: ForestConfig
    n_features: int
    n_train: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def kind(self) -> ForestKind:
        return self.config.kind

    def _check(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return X, squeeze

    def apply(self, X) -> np.ndarray:
        """Leaf node index reached by each row in each tree, shape (rows, trees)."""
        X, _ = self._check(X)
        return np.column_stack([tree.apply(X) for tree in self.trees])

    def leaf_members(self, tree_index: int, x) -> np.ndarray:
        """Training rows sharing the leaf of ``x`` in tree ``tree_index``."""
        X, _ = self._check(x)
        if X.shape[0] != 1:
            raise DimensionMismatch("leaf_members takes a single feature vector")
        tree = self.trees[tree_index]
        return tree.members[int(tree.apply(X)[0])]

    def predict_baseline(self, X):
        """Plain forest prediction: the average over trees of the reached leaf mean."""
        X, squeeze = self._check(X)
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.value[tree.apply(X)]
        out = total / self.n_trees
        return float(out[0]) if squeeze else out

    def to_dict(self) -> dict:
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "config": self.config.to_dict(),
            "n_features": self.n_features,
            "n_train": self.n_train,
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        if d.get("format") != FOREST_FORMAT or d.get("version") != FOREST_VERSION:
            raise ValidationError(
                f"unsupported forest document: format={d.get('format')!r} version={d.get('version')!r}"
            )
        return cls(
            trees=tuple(Tree.from_dict(t) for t in d["trees"]),
            config=ForestConfig(**d["config"]),
            n_features=int(d["n_features"]),
            n_train=int(d["n_train"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# ---------------------------------------------------------------------------
# Growing
# ---------------------------------------------------------------------------


def _best_split(X, y, boot, full, feats, config, rng):
    """Return ``(feature, threshold)`` of the best admissible split or None."""
    min_leaf = config.min_leaf_size
    yb = y[boot]
    nb = yb.shape[0]
    total = yb.sum()
    base = total * total / nb
    parent_sse = float(((yb - yb.mean()) ** 2).sum())
    if parent_sse <= 1e-12 * max(1.0, float(yb @ yb)):
        return None

    best_gain = 1e-12 * parent_sse
    best = None
    nf = full.shape[0]
    for f in feats:
        xb = X[boot, f]
        order = np.argsort(xb, kind="stable")
        xs = xb[order]
        if xs[0] == xs[-1]:
            continue
        if config.kind is ForestKind.RF:
            distinct = np.flatnonzero(xs[1:] > xs[:-1])
            thresholds = 0.5 * (xs[distinct] + xs[distinct + 1])
        else:
            thresholds = np.array([rng.uniform(xs[0], xs[-1])])
        n_left = np.searchsorted(xs, thresholds, side="right")
        full_sorted = np.sort(X[full, f])
        full_left = np.searchsorted(full_sorted, thresholds, side="right")
        ok = (
            (n_left >= min_leaf)
            & (nb - n_left >= min_leaf)
            & (full_left >= min_leaf)
            & (nf - full_left >= min_leaf)
        )
        if not ok.any():
            continue
        csum = np.cumsum(y[boot][order])
        nl = n_left[ok]
        sl = csum[nl - 1]
        gain = sl * sl / nl + (total - sl) ** 2 / (nb - nl) - base
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain = float(gain[i])
            best = (int(f), float(thresholds[ok][i]))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, config: ForestConfig, tree_index: int) -> Tree:
    rng = np.random.default_rng([config.rng_seed, tree_index])
    n, m = X.shape
    boot = rng.integers(0, n, size=n)
    full = np.arange(n)

    feature, threshold, left, right, value = [], [], [], [], []
    members: dict[int, np.ndarray] = {}

    def new_node() -> int:
        feature.append(_LEAF)
        threshold.append(0.0)
        left.append(_LEAF)
        right.append(_LEAF)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, boot, full, 0)]
    while stack:
        node, b_idx, f_idx, depth = stack.pop()
        split = None
        can_split = (
            (config.max_depth is None or depth < config.max_depth)
            and b_idx.shape[0] >= 2 * config.min_leaf_size
            and f_idx.shape[0] >= 2 * config.min_leaf_size
        )
        if can_split:
            if config.features_per_split == "all" or config.features_per_split >= m:
                feats = range(m)
            else:
                feats = np.sort(rng.choice(m, size=config.features_per_split, replace=False))
            split = _best_split(X, y, b_idx, f_idx, feats, config, rng)
        if split is None:
            members[node] = np.sort(f_idx)
            value[node] = float(y[f_idx].mean())
            continue
        f, t = split
        feature[node], threshold[node] = f, t
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        b_left = X[b_idx, f] <= t
        f_left = X[f_idx, f] <= t
        # Right child is pushed first so the left subtree is numbered first.
        stack.append((rnode, b_idx[~b_left], f_idx[~f_left], depth + 1))
        stack.append((lnode, b_idx[b_left], f_idx[f_left], depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=float),
        members=members,
    )


def fit_forest(data: Dataset, config: ForestConfig = ForestConfig(), n_jobs: int = 1) -> Forest:
    """Grow ``config.n_trees`` bagged trees on ``data``.

    Tree ``k`` draws from its own RNG stream seeded by ``(rng_seed, k)``, so
    the result does not depend on ``n_jobs``.
    """
    if data.n < 2 * config.min_leaf_size or data.n < 2:
        raise EmptyDataset(
            f"{data.n} rows cannot support min_leaf_size={config.min_leaf_size} "
            f"(need at least {max(2, 2 * config.min_leaf_size)})"
        )
    X, y = data.features, data.targets
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(lambda k: _grow_tree(X, y, config, k), range(config.n_trees)))
    else:
        trees = [_grow_tree(X, y, config, k) for k in range(config.n_trees)]
    return Forest(tuple(trees), config, data.m, data.n)


def leaf_members(forest: Forest, tree_index: int, x) -> np.ndarray:
    return forest.leaf_members(tree_index, x)


def predict_baseline(forest: Forest, x):
    return forest.predict_baseline(x)
