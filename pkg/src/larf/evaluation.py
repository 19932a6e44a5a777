"""Metrics, cross-validated temperature selection, benchmarks and paired tests."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from larf import qp
from larf.attention import KernelParams, compute_features, default_taus
from larf.data import (
    Dataset,
    GeneratorSpec,
    SplitSpec,
    fold_indices,
    generate,
    load_csv,
    split_indices,
    standardize,
)
from larf.errors import ConstantTarget, LengthMismatch, LarfError, MismatchedCells, ValidationError
from larf.forest import ForestConfig, ForestKind, fit_forest
from larf.models import ModelVariant, fit_model, predict_from_features

REPORT_FORMAT = "larf-report"
REPORT_VERSION = 1
DEFAULT_TAU0_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
T_STAT_CAP = 1e300


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise LengthMismatch(f"need equal nonempty 1-D arrays, got {y.shape} and {p.shape}")
    return y, p


def r2(y_true, y_pred) -> float:
    y, p = _pair(y_true, y_pred)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ConstantTarget("R^2 is undefined for a constant target")
    return 1.0 - float(((y - p) ** 2).sum()) / ss_tot


def mae(y_true, y_pred) -> float:
    y, p = _pair(y_true, y_pred)
    return float(np.abs(y - p).mean())


# ---------------------------------------------------------------------------
# Temperature selection
# ---------------------------------------------------------------------------


def _argmax_smallest(grid: Sequence[float], scores: Sequence[float]) -> float:
    best = max(scores)
    return min(t for t, s in zip(grid, scores) if s == best)


def cv_scores(
    train: Dataset,
    variants: Sequence[ModelVariant],
    forest_config: ForestConfig,
    tau0_grid: Sequence[float],
    M: int,
    folds: int = 3,
    seed: int = 0,
    slab_lower: float = qp.DEFAULT_SLAB_LOWER,
    solver_kw: Optional[dict] = None,
) -> dict:
    """Mean validation R^2 over folds for each variant and grid temperature.

    Each fold standardizes and grows a forest on its own training part, so
    validation rows never take part in fitting.
    """
    solver_kw = solver_kw or {}
    taus = default_taus(M)
    scores = {v: np.zeros(len(tau0_grid)) for v in variants}
    for tr_idx, va_idx in fold_indices(train.n, folds, seed):
        transform, fold_train = standardize(train.subset(tr_idx))
        val = train.subset(va_idx)
        Zval = transform.apply(val.features)
        forest = fit_forest(fold_train, forest_config)
        for leaf in (False, True):
            group = [v for v in variants if v.leaf_attention == leaf]
            if not group:
                continue
            # Leaf-free features do not depend on tau0.
            grid_iter = list(enumerate(tau0_grid)) if leaf else [(None, tau0_grid[0])]
            for i, tau0 in grid_iter:
                kernel = KernelParams(tau0, taus)
                f_train = compute_features(fold_train.features, forest, fold_train, kernel, leaf)
                f_val = compute_features(Zval, forest, fold_train, kernel, leaf)
                for v in group:
                    model = fit_model(v, forest, fold_train, kernel, slab_lower, features=f_train, **solver_kw)
                    score = _safe_r2(val.targets, predict_from_features(f_val, model.params))
                    if i is None:
                        scores[v] += score
                    else:
                        scores[v][i] += score
    return {v: (s / folds).tolist() for v, s in scores.items()}


def _safe_r2(y, p) -> float:
    try:
        return r2(y, p)
    except ConstantTarget:
        return -mae(y, p)


def select_tau0(
    train: Dataset,
    variant: ModelVariant,
    forest_config: ForestConfig,
    tau0_grid: Sequence[float] = DEFAULT_TAU0_GRID,
    M: int = 10,
    split_spec: SplitSpec = SplitSpec(),
    slab_lower: float = qp.DEFAULT_SLAB_LOWER,
) -> float:
    """Grid temperature with the best mean CV R^2; ties go to the smaller value."""
    grid = list(tau0_grid)
    if not grid:
        raise ValidationError("tau0 grid is empty")
    if len(grid) == 1:
        return float(grid[0])
    variant = ModelVariant(variant)
    scores = cv_scores(train, [variant], forest_config, grid, M, split_spec.folds, split_spec.seed, slab_lower)
    return float(_argmax_smallest(grid, scores[variant]))


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSource:
    """A named dataset: a synthetic generator or a CSV file.

    Synthetic sources draw a fresh sample per repeat (generator seed plus the
    repeat index); CSV sources are fixed and only the split changes.
    """

    name: str
    generator: Optional[dict] = None
    csv: Optional[str] = None
    target: Union[str, int] = -1
    has_header: bool = True
    feature_columns: Optional[list] = None

    def __post_init__(self):
        if (self.generator is None) == (self.csv is None):
            raise ValidationError(f"dataset {self.name!r}: give exactly one of 'generator' or 'csv'")
        if self.generator is not None:
            GeneratorSpec(**self.generator)

    def load(self, repeat: int = 0) -> Dataset:
        if self.generator is not None:
            spec = GeneratorSpec(**self.generator)
            spec = GeneratorSpec(spec.kind, spec.n, spec.m, spec.noise_sd, spec.seed + repeat)
            return generate(spec)
        return load_csv(self.csv, self.target, self.has_header, self.feature_columns)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class BenchmarkPlan:
    datasets: tuple
    variants: tuple = tuple(ModelVariant)
    forest_kinds: tuple = (ForestKind.RF,)
    M: int = 10
    tau0_grid: tuple = DEFAULT_TAU0_GRID
    repeats: int = 10
    base_seed: int = 0
    n_trees: int = 100
    min_leaf_size: int = 10
    features_per_split: Union[int, str] = "all"
    slab_lower: float = qp.DEFAULT_SLAB_LOWER
    train_fraction: float = 0.8
    folds: int = 3
    include_baseline: bool = True
    tol: float = qp.DEFAULT_TOL
    max_iter: int = qp.DEFAULT_MAX_ITER

    def __post_init__(self):
        object.__setattr__(
            self,
            "datasets",
            tuple(d if isinstance(d, DatasetSource) else DatasetSource(**d) for d in self.datasets),
        )
        object.__setattr__(self, "variants", tuple(ModelVariant(v) for v in self.variants))
        object.__setattr__(self, "forest_kinds", tuple(ForestKind(k) for k in self.forest_kinds))
        object.__setattr__(self, "tau0_grid", tuple(float(t) for t in self.tau0_grid))
        if not self.datasets:
            raise ValidationError("benchmark plan lists no datasets")
        if not self.forest_kinds:
            raise ValidationError("benchmark plan lists no forest kinds")
        if not self.variants and not self.include_baseline:
            raise ValidationError("benchmark plan has no models to evaluate")
        if not self.tau0_grid or any(t <= 0 for t in self.tau0_grid):
            raise ValidationError("tau0 grid must be nonempty and positive")
        if self.repeats < 1:
            raise ValidationError(f"repeats must be at least 1, got {self.repeats}")
        if self.M < 1:
            raise ValidationError(f"M must be at least 1, got {self.M}")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate dataset names in plan: {names}")
        SplitSpec(self.train_fraction, 0, self.folds)

    @property
    def model_names(self) -> list[str]:
        return [v.value for v in self.variants]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = [s.to_dict() for s in self.datasets]
        d["variants"] = [v.value for v in self.variants]
        d["forest_kinds"] = [k.value for k in self.forest_kinds]
        d["tau0_grid"] = list(self.tau0_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown benchmark plan fields: {sorted(unknown)}")
        return cls(**d)


def _cell_seed(base_seed: int, repeat: int) -> int:
    return base_seed + repeat


def run_cell(plan: BenchmarkPlan, dataset_index: int, kind: ForestKind, repeat: int) -> dict:
    """Evaluate every model of the plan on one (dataset, forest kind, repeat)."""
    source = plan.datasets[dataset_index]
    seed = _cell_seed(plan.base_seed, repeat)
    cell = {"dataset": source.name, "kind": kind.value, "repeat": repeat, "seed": seed, "results": {}}
    try:
        data = source.load(repeat)
        split_spec = SplitSpec(plan.train_fraction, seed, plan.folds)
        train_idx, test_idx = split_indices(data.n, split_spec)
        train, test = data.subset(train_idx), data.subset(test_idx)
        transform, train_std = standardize(train)
        Ztest = transform.apply(test.features)
        config = ForestConfig(plan.n_trees, kind, plan.min_leaf_size, None, plan.features_per_split, seed)
        forest = fit_forest(train_std, config)
        results = cell["results"]
        if plan.include_baseline:
            pred = forest.predict_baseline(Ztest)
            results[kind.value] = _metrics(test.targets, pred, None)

        if plan.variants:
            solver_kw = {"tol": plan.tol, "max_iter": plan.max_iter}
            scores = cv_scores(
                train, plan.variants, config, plan.tau0_grid, plan.M, plan.folds, seed, plan.slab_lower, solver_kw
            )
            taus = default_taus(plan.M)
            cache = {}
            for v in plan.variants:
                tau0 = float(_argmax_smallest(plan.tau0_grid, scores[v]))
                kernel = KernelParams(tau0, taus)
                key = (v.leaf_attention, tau0 if v.leaf_attention else None)
                if key not in cache:
                    cache[key] = (
                        compute_features(train_std.features, forest, train_std, kernel, v.leaf_attention),
                        compute_features(Ztest, forest, train_std, kernel, v.leaf_attention),
                    )
                f_train, f_test = cache[key]
                model = fit_model(v, forest, train_std, kernel, plan.slab_lower, features=f_train, **solver_kw)
                pred = predict_from_features(f_test, model.params)
                results[v.value] = _metrics(test.targets, pred, tau0)
                results[v.value]["epsilons"] = model.params.epsilons.tolist()
    except LarfError as exc:
        cell["error"] = f"{type(exc).__name__}: {exc}"
    return cell


def _metrics(y, pred, tau0) -> dict:
    try:
        r2_value: Optional[float] = r2(y, pred)
    except ConstantTarget:
        r2_value = None
    return {"r2": r2_value, "mae": mae(y, pred), "tau0": tau0}


def _run_cell_args(args):
    plan_dict, i, kind, repeat = args
    plan = BenchmarkPlan.from_dict(plan_dict)
    start = time.perf_counter()
    cell = run_cell(plan, i, ForestKind(kind), repeat)
    return cell, time.perf_counter() - start


@dataclass
class EvaluationReport:
    plan: dict
    cells: list
    rows: list
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        # Wall-clock timings are kept out so the document is reproducible.
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "plan": self.plan,
            "cells": self.cells,
            "rows": self.rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        if d.get("format") != REPORT_FORMAT or d.get("version") != REPORT_VERSION:
            raise ValidationError("unsupported report document")
        return cls(d["plan"], d["cells"], d["rows"])

    def row(self, dataset: str, kind: str, model: str) -> dict:
        for r in self.rows:
            if r["dataset"] == dataset and r["kind"] == kind and r["model"] == model:
                return r
        raise KeyError((dataset, kind, model))

    def mean_r2(self, dataset: str, kind: str, model: str) -> Optional[float]:
        return self.row(dataset, kind, model)["r2_mean"]

    @property
    def datasets(self) -> list[str]:
        return list(dict.fromkeys(r["dataset"] for r in self.rows))

    @property
    def kinds(self) -> list[str]:
        return list(dict.fromkeys(r["kind"] for r in self.rows))

    def models(self, kind: str) -> list[str]:
        return list(dict.fromkeys(r["model"] for r in self.rows if r["kind"] == kind))

    def best_r2(self, dataset: str, kind: str) -> Optional[float]:
        """Best mean R^2 over all models of one forest kind on one dataset."""
        values = [
            r["r2_mean"]
            for r in self.rows
            if r["dataset"] == dataset and r["kind"] == kind and r["r2_mean"] is not None
        ]
        return max(values) if values else None

    def to_table(self, metric: str = "r2") -> str:
        lines = []
        for kind in self.kinds:
            models = self.models(kind)
            header = ["Data set", "tau0", *models]
            body = []
            for ds in self.datasets:
                rows = {r["model"]: r for r in self.rows if r["dataset"] == ds and r["kind"] == kind}
                tau0s = [t for r in rows.values() for t in r["tau0"] if t is not None]
                tau0 = _fmt(float(np.median(tau0s)), 3) if tau0s else "-"
                cells = []
                for mname in models:
                    r = rows.get(mname)
                    val = None if r is None else r[f"{metric}_mean"]
                    cells.append("-" if val is None else _fmt(val, 3))
                body.append([ds, tau0, *cells])
            widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
            title = f"{'R^2' if metric == 'r2' else 'MAE'} ({kind})"
            lines.append(title)
            lines.append("  ".join(h.rjust(w) for h, w in zip(header, widths)))
            for row in body:
                lines.append("  ".join(str(c).rjust(w) for c, w in zip(row, widths)))
            lines.append("")
        return "\n".join(lines)


def _fmt(x: float, digits: int) -> str:
    return f"{x:.{digits}f}" if abs(x) < 1e4 else f"{x:.4g}"


def _aggregate(plan: BenchmarkPlan, cells: list) -> list:
    rows = []
    for source in plan.datasets:
        for kind in plan.forest_kinds:
            models = ([kind.value] if plan.include_baseline else []) + plan.model_names
            group = [c for c in cells if c["dataset"] == source.name and c["kind"] == kind.value]
            for model in models:
                ok = [c for c in group if model in c["results"]]
                r2s = [c["results"][model]["r2"] for c in ok if c["results"][model]["r2"] is not None]
                maes = [c["results"][model]["mae"] for c in ok]
                rows.append(
                    {
                        "dataset": source.name,
                        "kind": kind.value,
                        "model": model,
                        "r2_mean": float(np.mean(r2s)) if r2s else None,
                        "r2_sd": float(np.std(r2s)) if r2s else None,
                        "mae_mean": float(np.mean(maes)) if maes else None,
                        "mae_sd": float(np.std(maes)) if maes else None,
                        "tau0": [c["results"][model]["tau0"] for c in ok],
                        "seeds": [c["seed"] for c in ok],
                        "failures": [c["seed"] for c in group if model not in c["results"]],
                    }
                )
    return rows


def run_benchmark(plan: BenchmarkPlan, workers: int = 1) -> EvaluationReport:
    """Run every (dataset, forest kind, repeat) cell and aggregate by model.

    Seeds are bound to cells, so the report is identical for any worker count.
    """
    tasks = [
        (plan.to_dict(), i, kind.value, r)
        for i in range(len(plan.datasets))
        for kind in plan.forest_kinds
        for r in range(plan.repeats)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_cell_args, tasks))
    else:
        outputs = [_run_cell_args(t) for t in tasks]
    cells = [c for c, _ in outputs]
    timings = {f"{c['dataset']}/{c['kind']}/{c['repeat']}": round(s, 3) for c, s in outputs}
    return EvaluationReport(plan.to_dict(), cells, _aggregate(plan, cells), timings)


# ---------------------------------------------------------------------------
# Paired comparison
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def _ibeta(a: float, b: float, x: float, xc: float) -> float:
    # xc = 1 - x, supplied separately so callers can avoid cancellation near x = 1
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(xc)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    return _ibeta(a, b, x, 1.0 - x)


def t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    t2 = t * t
    return _ibeta(0.5 * df, 0.5, df / (df + t2), t2 / (df + t2))


@dataclass(frozen=True)
class PairedComparison:
    datasets: list
    deltas: list
    t: float
    df: int
    p_value: float
    degenerate: bool = False


def paired_t(deltas: Sequence[float], datasets: Optional[Sequence[str]] = None) -> PairedComparison:
    """Paired t statistic of per-dataset deltas with ``n - 1`` degrees of freedom.

    Zero-variance deltas give ``t = 0`` (``p = 1``) when all are zero and a
    capped, flagged statistic otherwise.
    """
    d = np.asarray(deltas, dtype=float)
    if d.size < 2:
        raise MismatchedCells("paired t-test needs at least two datasets")
    names = list(datasets) if datasets is not None else [str(i) for i in range(d.size)]
    df = d.size - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedComparison(names, d.tolist(), 0.0, df, 1.0)
        return PairedComparison(names, d.tolist(), math.copysign(T_STAT_CAP, mean), df, 0.0, True)
    t = mean / (sd / math.sqrt(d.size))
    return PairedComparison(names, d.tolist(), t, df, t_two_sided_p(t, df))


def _split_model(spec: str, kinds: list[str]) -> tuple[str, str]:
    if "/" in spec:
        kind, model = spec.split("/", 1)
        return kind, model
    if len(kinds) != 1:
        raise MismatchedCells(f"model {spec!r} is ambiguous; qualify it as KIND/MODEL among {kinds}")
    return kinds[0], spec


def paired_compare(report: EvaluationReport, model_a: str, model_b: str, metric: str = "r2") -> PairedComparison:
    """Per-dataset mean-metric deltas ``a - b`` and their paired t-test.

    Models are named ``KIND/MODEL`` (e.g. ``RF/eM-w-LARF``); ``KIND/best``
    picks the best R^2 of that kind on each dataset.
    """
    kinds = report.kinds
    ka, ma = _split_model(model_a, kinds)
    kb, mb = _split_model(model_b, kinds)
    names, deltas = [], []
    for ds in report.datasets:
        va = _value(report, ds, ka, ma, metric)
        vb = _value(report, ds, kb, mb, metric)
        if va is None or vb is None:
            raise MismatchedCells(f"dataset {ds!r} lacks results for {model_a} or {model_b}")
        names.append(ds)
        deltas.append(va - vb)
    return paired_t(deltas, names)


def _value(report: EvaluationReport, ds: str, kind: str, model: str, metric: str) -> Optional[float]:
    if model == "best":
        return report.best_r2(ds, kind)
    try:
        return report.row(ds, kind, model)[f"{metric}_mean"]
    except KeyError:
        return None
