"""Attention-based forest variants trained by constrained least squares.

Tree weights are a mixture of ``M`` Huber contamination models::

    alpha_k(x) = 1/M * sum_j [(1 - eps_j) * softmax_k(-||x - A_k(x)||^2 / tau_j) + gamma_jk]

with ``gamma_jk >= 0`` and ``sum_k gamma_jk = eps_j in [lower, 1]``. The
prediction ``sum_k alpha_k(x) B_k(x)`` is linear in ``gamma``, so training
reduces to a quadratic program.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from larf import qp
from larf.attention import AttentionFeatures, KernelParams, compute_features
from larf.data import Dataset, Standardizer, standardize
from larf.errors import DimensionMismatch, ValidationError, VariantKernelMismatch
from larf.forest import Forest, ForestConfig, fit_forest

MODEL_FORMAT = "larf-model"
MODEL_VERSION = 1


class ModelVariant(str, Enum):
    EPS_M_ARF = "eM-ARF"
    EPS_M_LARF = "eM-LARF"
    EPS_M_W_ARF = "eM-w-ARF"
    EPS_M_W_LARF = "eM-w-LARF"

    @property
    def leaf_attention(self) -> bool:
        return self in (ModelVariant.EPS_M_LARF, ModelVariant.EPS_M_W_LARF)

    @property
    def trainable_w(self) -> bool:
        return self in (ModelVariant.EPS_M_W_ARF, ModelVariant.EPS_M_W_LARF)


@dataclass(frozen=True)
class AttentionParameters:
    gammas: np.ndarray
    epsilons: np.ndarray

    @property
    def M(self) -> int:
        return self.gammas.shape[0]

    @property
    def mean_epsilon(self) -> float:
        return float(self.epsilons.mean())

    @property
    def block_weights(self) -> np.ndarray:
        """Per-block contamination distribution ``w^(j) = gamma^(j) / eps_j``."""
        return self.gammas / self.epsilons[:, None]


def mixture_weights(features: AttentionFeatures, params: AttentionParameters) -> np.ndarray:
    """Tree weights ``alpha`` for every sample, shape (S, T)."""
    eps = params.epsilons
    mixed = (1.0 - eps)[None, :, None] * features.sigma + params.gammas[None, :, :]
    return mixed.mean(axis=1)


def predict_from_features(features: AttentionFeatures, params: AttentionParameters) -> np.ndarray:
    return np.einsum("st,st->s", mixture_weights(features, params), features.D)


@dataclass(frozen=True)
class TrainedModel:
    variant: ModelVariant
    forest: Forest
    kernel: KernelParams
    params: AttentionParameters
    train: Dataset
    transform: Standardizer
    slab_lower: float = qp.DEFAULT_SLAB_LOWER
    fixed_epsilon: Optional[float] = None
    solver: dict = field(default_factory=dict)

    @property
    def leaf_attention(self) -> bool:
        return self.variant.leaf_attention

    def features(self, X) -> AttentionFeatures:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.forest.n_features:
            raise DimensionMismatch(
                f"model expects {self.forest.n_features} features, got {X.shape[1]}"
            )
        Z = self.transform.apply(X)
        return compute_features(Z, self.forest, self.train, self.kernel, self.leaf_attention)

    def attention_weights(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        alpha = mixture_weights(self.features(X), self.params)
        return alpha[0] if X.ndim == 1 else alpha

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 2 and X.shape[0] == 0:
            return np.empty(0)
        out = predict_from_features(self.features(X), self.params)
        return float(out[0]) if X.ndim == 1 else out

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        forest_doc = self.forest.to_dict()
        forest_text = json.dumps(forest_doc, sort_keys=True, separators=(",", ":"))
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "variant": self.variant.value,
            "kernel": {"tau0": self.kernel.tau0, "taus": list(self.kernel.taus)},
            "slab_lower": self.slab_lower,
            "fixed_epsilon": self.fixed_epsilon,
            "gammas": self.params.gammas.tolist(),
            "epsilons": self.params.epsilons.tolist(),
            "standardizer": self.transform.to_dict(),
            "train": {
                "features": self.train.features.tolist(),
                "targets": self.train.targets.tolist(),
                "feature_names": list(self.train.feature_names) if self.train.feature_names else None,
            },
            "forest_sha256": hashlib.sha256(forest_text.encode()).hexdigest(),
            "forest": forest_doc,
            "solver": self.solver,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValidationError(
                f"unsupported model document: format={d.get('format')!r} version={d.get('version')!r}"
            )
        forest = Forest.from_dict(d["forest"])
        forest_text = json.dumps(d["forest"], sort_keys=True, separators=(",", ":"))
        if hashlib.sha256(forest_text.encode()).hexdigest() != d["forest_sha256"]:
            raise ValidationError("embedded forest does not match its recorded hash")
        train = d["train"]
        return cls(
            variant=ModelVariant(d["variant"]),
            forest=forest,
            kernel=KernelParams(d["kernel"]["tau0"], tuple(d["kernel"]["taus"])),
            params=AttentionParameters(
                np.asarray(d["gammas"], dtype=float), np.asarray(d["epsilons"], dtype=float)
            ),
            train=Dataset(train["features"], train["targets"], train["feature_names"]),
            transform=Standardizer.from_dict(d["standardizer"]),
            slab_lower=d["slab_lower"],
            fixed_epsilon=d["fixed_epsilon"],
            solver=d["solver"],
        )

    @classmethod
    def from_json(cls, text: str) -> "TrainedModel":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def build_problem(
    variant: ModelVariant,
    features: AttentionFeatures,
    y: np.ndarray,
    slab_lower: float = qp.DEFAULT_SLAB_LOWER,
    fixed_epsilon: Optional[float] = None,
) -> qp.QuadraticProblem:
    """Quadratic program whose variables are ``gamma`` (trainable w) or ``eps`` (fixed w)."""
    S, M, T = features.C.shape
    c_sums = features.C.sum(axis=2)  # (S, M)
    offset = y - c_sums.mean(axis=1)
    lo, hi = (slab_lower, 1.0) if fixed_epsilon is None else (fixed_epsilon, fixed_epsilon)
    if variant.trainable_w:
        design = (features.D[:, None, :] - c_sums[:, :, None]) / M
        return qp.QuadraticProblem(offset, design.reshape(S, M * T), qp.BlockSlabSimplex(M, T, lo, hi))
    d_mean = features.D.mean(axis=1)
    design = (d_mean[:, None] - c_sums) / M
    return qp.QuadraticProblem(offset, design, qp.BoxScalar(M, lo, hi))


def params_from_solution(variant: ModelVariant, theta: np.ndarray, M: int, T: int) -> AttentionParameters:
    if variant.trainable_w:
        gammas = theta.reshape(M, T).copy()
        return AttentionParameters(gammas, gammas.sum(axis=1))
    eps = theta.copy()
    return AttentionParameters(np.repeat(eps[:, None] / T, T, axis=1), eps)


def fit_model(
    variant: ModelVariant,
    forest: Forest,
    data: Dataset,
    kernel: KernelParams,
    slab_lower: float = qp.DEFAULT_SLAB_LOWER,
    *,
    transform: Optional[Standardizer] = None,
    fixed_epsilon: Optional[float] = None,
    M: Optional[int] = None,
    features: Optional[AttentionFeatures] = None,
    tol: float = qp.DEFAULT_TOL,
    max_iter: int = qp.DEFAULT_MAX_ITER,
) -> TrainedModel:
    """Fit attention parameters on ``data``, the standardized set ``forest`` was grown on.

    ``transform`` maps raw inputs into the space of ``data``; identity when omitted.
    Precomputed training ``features`` may be passed to skip recomputation.
    """
    variant = ModelVariant(variant)
    if M is not None and M != kernel.M:
        raise VariantKernelMismatch(f"variant configured for M={M} but kernel has {kernel.M} temperatures")
    if fixed_epsilon is not None and not (slab_lower <= fixed_epsilon <= 1.0):
        raise ValidationError(f"fixed_epsilon must lie in [{slab_lower}, 1], got {fixed_epsilon}")
    if data.m != forest.n_features or data.n != forest.n_train:
        raise DimensionMismatch("data does not match the rows/features the forest was grown on")
    if transform is None:
        transform = Standardizer(np.zeros(data.m), np.ones(data.m))
    if features is None:
        features = compute_features(data.features, forest, data, kernel, variant.leaf_attention)

    problem = build_problem(variant, features, data.targets, slab_lower, fixed_epsilon)
    # Solve in target-scale-free units so the tolerance is meaningful for any y.
    scale = float(data.targets.std()) or 1.0
    scaled = qp.QuadraticProblem(problem.residual_offset / scale, problem.design / scale, problem.constraint)
    sol = qp.solve(scaled, tol=tol, max_iter=max_iter)

    params = params_from_solution(variant, sol.variables, kernel.M, forest.n_trees)
    solver = {
        "objective": sol.objective * scale * scale,
        "iterations": sol.iterations,
        "kkt_residual": sol.kkt_residual,
        "converged": sol.converged,
    }
    return TrainedModel(
        variant=variant,
        forest=forest,
        kernel=kernel,
        params=params,
        train=data,
        transform=transform,
        slab_lower=slab_lower,
        fixed_epsilon=fixed_epsilon,
        solver=solver,
    )


def train_model(
    variant: ModelVariant,
    raw_train: Dataset,
    forest_config: ForestConfig,
    kernel: KernelParams,
    slab_lower: float = qp.DEFAULT_SLAB_LOWER,
    *,
    fixed_epsilon: Optional[float] = None,
    forest: Optional[Forest] = None,
    n_jobs: int = 1,
    **solver_kw,
) -> TrainedModel:
    """Standardize raw training data, grow the forest (unless given) and fit ``variant``."""
    transform, data = standardize(raw_train)
    if forest is None:
        forest = fit_forest(data, forest_config, n_jobs=n_jobs)
    return fit_model(
        variant, forest, data, kernel, slab_lower, transform=transform, fixed_epsilon=fixed_epsilon, **solver_kw
    )


def predict(model: TrainedModel, x):
    return model.predict(x)


def attention_weights(model: TrainedModel, x) -> np.ndarray:
    return model.attention_weights(x)
