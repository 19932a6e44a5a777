"""Datasets: CSV ingestion, synthetic generators, splitting and standardization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from larf.errors import (
    DimensionMismatch,
    InvalidSpec,
    LengthMismatch,
    MissingTarget,
    ParseError,
    TooFewRows,
    ValidationError,
)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets, dtype=float)
        if X.ndim != 2:
            raise DimensionMismatch(f"features must be a matrix, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise LengthMismatch(f"{X.shape[0]} feature rows but targets have shape {y.shape}")
        if X.shape[1] < 1:
            raise DimensionMismatch("dataset needs at least one feature column")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValidationError("dataset contains missing or non-finite values")
        names = self.feature_names
        if names is not None:
            names = tuple(names)
            if len(names) != X.shape[1]:
                raise DimensionMismatch(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.targets[idx], self.feature_names)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


class GeneratorKind(str, Enum):
    FRIEDMAN1 = "friedman1"
    FRIEDMAN2 = "friedman2"
    FRIEDMAN3 = "friedman3"
    LINEAR_REGRESSION = "regression"
    SPARSE_UNCORRELATED = "sparse"


DEFAULT_NOISE = {
    GeneratorKind.FRIEDMAN1: 1.0,
    GeneratorKind.FRIEDMAN2: 125.0,
    GeneratorKind.FRIEDMAN3: 0.1,
    GeneratorKind.LINEAR_REGRESSION: 1.0,
    GeneratorKind.SPARSE_UNCORRELATED: 1.0,
}

DEFAULT_M = {
    GeneratorKind.FRIEDMAN1: 10,
    GeneratorKind.FRIEDMAN2: 4,
    GeneratorKind.FRIEDMAN3: 4,
    GeneratorKind.LINEAR_REGRESSION: 100,
    GeneratorKind.SPARSE_UNCORRELATED: 10,
}


@dataclass(frozen=True)
class GeneratorSpec:
    kind: GeneratorKind
    n: int = 100
    m: Optional[int] = None
    noise_sd: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        try:
            kind = GeneratorKind(self.kind)
        except ValueError:
            raise InvalidSpec(
                f"unknown generator kind {self.kind!r}; choose from {[k.value for k in GeneratorKind]}"
            ) from None
        object.__setattr__(self, "kind", kind)
        if self.m is None:
            object.__setattr__(self, "m", DEFAULT_M[kind])
        if self.noise_sd is None:
            object.__setattr__(self, "noise_sd", DEFAULT_NOISE[kind])
        if self.n < 1:
            raise InvalidSpec(f"n must be positive, got {self.n}")
        if self.noise_sd < 0:
            raise InvalidSpec(f"noise_sd must be nonnegative, got {self.noise_sd}")
        if kind in (GeneratorKind.FRIEDMAN2, GeneratorKind.FRIEDMAN3) and self.m != 4:
            raise InvalidSpec(f"{kind.value} has exactly 4 features, got m={self.m}")
        if kind is GeneratorKind.FRIEDMAN1 and self.m < 5:
            raise InvalidSpec(f"friedman1 needs m >= 5, got m={self.m}")
        if kind is GeneratorKind.SPARSE_UNCORRELATED and self.m < 4:
            raise InvalidSpec(f"sparse needs m >= 4, got m={self.m}")
        if self.m < 1:
            raise InvalidSpec(f"m must be positive, got {self.m}")


def friedman1(X: np.ndarray) -> np.ndarray:
    return (
        10.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
        + 20.0 * (X[:, 2] - 0.5) ** 2
        + 10.0 * X[:, 3]
        + 5.0 * X[:, 4]
    )


def friedman2(X: np.ndarray) -> np.ndarray:
    return np.sqrt(X[:, 0] ** 2 + (X[:, 1] * X[:, 2] - 1.0 / (X[:, 1] * X[:, 3])) ** 2)


def friedman3(X: np.ndarray) -> np.ndarray:
    return np.arctan((X[:, 1] * X[:, 2] - 1.0 / (X[:, 1] * X[:, 3])) / X[:, 0])


def sparse_uncorrelated(X: np.ndarray) -> np.ndarray:
    return X[:, 0] + 2.0 * X[:, 1] - 2.0 * X[:, 2] - 1.5 * X[:, 3]


def _friedman23_inputs(rng: np.random.Generator, n: int) -> np.ndarray:
    X = rng.uniform(size=(n, 4))
    X[:, 0] *= 100.0
    X[:, 1] = 40.0 * np.pi + 520.0 * np.pi * X[:, 1]
    X[:, 3] = 1.0 + 10.0 * X[:, 3]
    return X


def generate(spec: GeneratorSpec) -> Dataset:
    """Draw a synthetic regression dataset; identical specs give identical data."""
    rng = np.random.default_rng(spec.seed)
    n, m = spec.n, spec.m
    kind = spec.kind
    if kind is GeneratorKind.FRIEDMAN1:
        X = rng.uniform(size=(n, m))
        y = friedman1(X)
    elif kind is GeneratorKind.FRIEDMAN2:
        X = _friedman23_inputs(rng, n)
        y = friedman2(X)
    elif kind is GeneratorKind.FRIEDMAN3:
        X = _friedman23_inputs(rng, n)
        y = friedman3(X)
    elif kind is GeneratorKind.SPARSE_UNCORRELATED:
        X = rng.standard_normal(size=(n, m))
        y = sparse_uncorrelated(X)
    else:
        X = rng.standard_normal(size=(n, m))
        beta = 100.0 * rng.uniform(size=m)
        y = X @ beta
    y = y + spec.noise_sd * rng.standard_normal(size=n)
    names = tuple(f"x{i + 1}" for i in range(m))
    return Dataset(X, y, names)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(
    path: Union[str, Path],
    target_column: Union[str, int] = -1,
    has_header: bool = True,
    feature_columns: Optional[Sequence[Union[str, int]]] = None,
    delimiter: str = ",",
) -> Dataset:
    """Read a numeric CSV; every non-target column is a feature unless listed.

    Rows and columns in error messages are 1-based and count the header line.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh, delimiter=delimiter) if row]
    header: Optional[list[str]] = None
    if has_header:
        if not rows:
            raise MissingTarget(f"{path}: no header line")
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
    n_cols = len(header) if header is not None else (len(rows[0]) if rows else 0)

    def resolve(col: Union[str, int]) -> int:
        if isinstance(col, str) and not col.lstrip("-").isdigit():
            if header is None or col not in header:
                raise MissingTarget(f"{path}: column {col!r} not found")
            return header.index(col)
        idx = int(col)
        if not -n_cols <= idx < n_cols:
            raise MissingTarget(f"{path}: column index {idx} out of range for {n_cols} columns")
        return idx % n_cols

    target_idx = resolve(target_column)
    if feature_columns is None:
        feat_idx = [j for j in range(n_cols) if j != target_idx]
    else:
        feat_idx = [resolve(c) for c in feature_columns]

    first_line = 2 if has_header else 1
    values = np.empty((len(rows), n_cols))
    for i, row in enumerate(rows):
        line = i + first_line
        if len(row) != n_cols:
            raise ParseError(f"{path}: expected {n_cols} fields, found {len(row)}", line, len(row) + 1)
        for j, cell in enumerate(row):
            text = cell.strip()
            if not text:
                raise ParseError(f"{path}: missing value", line, j + 1)
            try:
                values[i, j] = float(text)
            except ValueError:
                raise ParseError(f"{path}: non-numeric value {text!r}", line, j + 1) from None
            if not math.isfinite(values[i, j]):
                raise ParseError(f"{path}: non-finite value {text!r}", line, j + 1)

    names = tuple(header[j] for j in feat_idx) if header is not None else None
    X = values[:, feat_idx].reshape(len(rows), len(feat_idx))
    return Dataset(X, values[:, target_idx], names)


def write_csv(data: Dataset, path: Union[str, Path], target_name: str = "y") -> None:
    """Write features then target, with header; ``repr`` floats round-trip exactly."""
    names = data.feature_names or tuple(f"x{i + 1}" for i in range(data.m))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*names, target_name])
        for xrow, yv in zip(data.features.tolist(), data.targets.tolist()):
            writer.writerow([repr(v) for v in xrow] + [repr(yv)])


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    folds: int = 3

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise InvalidSpec(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.folds < 2:
            raise InvalidSpec(f"folds must be at least 2, got {self.folds}")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise TooFewRows(f"need at least 2 rows to split, got {n}")
    n_train = int(round(spec.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(spec.seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(data.n, spec)
    return data.subset(train_idx), data.subset(test_idx)


def fold_indices(n: int, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled K-fold partition; earlier folds take the remainder rows."""
    if folds < 2:
        raise InvalidSpec(f"folds must be at least 2, got {folds}")
    if n < folds:
        raise TooFewRows(f"cannot make {folds} folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = np.full(folds, n // folds)
    sizes[: n % folds] += 1
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for f in range(folds):
        val = np.sort(perm[bounds[f] : bounds[f + 1]])
        train = np.sort(np.concatenate([perm[: bounds[f]], perm[bounds[f + 1] :]]))
        out.append((train, val))
    return out


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine map to zero mean and unit (population) variance."""

    mean: np.ndarray
    scale: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        if X.shape[0] < 2:
            raise TooFewRows("standardization needs at least 2 rows")
        constant = np.ptp(X, axis=0) == 0
        # Constant columns map exactly to zero with a unit divisor.
        mean = np.where(constant, X[0], X.mean(axis=0))
        scale = np.where(constant, 1.0, X.std(axis=0))
        return cls(mean, scale)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.mean.shape[0]:
            raise DimensionMismatch(f"expected {self.mean.shape[0]} features, got {X.shape[-1]}")
        return (X - self.mean) / self.scale

    def apply_dataset(self, data: Dataset) -> Dataset:
        return Dataset(self.apply(data.features), data.targets, data.feature_names)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


def standardize(train: Dataset) -> tuple[Standardizer, Dataset]:
    transform = Standardizer.fit(train.features)
    return transform, transform.apply_dataset(train)
