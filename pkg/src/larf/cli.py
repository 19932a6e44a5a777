"""Command-line interface: ``larf {generate,train,predict,benchmark,compare}``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from larf import qp
from larf.attention import KernelParams, default_taus
from larf.data import Dataset, GeneratorSpec, SplitSpec, generate, load_csv, standardize, write_csv
from larf.errors import LarfError, ValidationError
from larf.evaluation import (
    DEFAULT_TAU0_GRID,
    BenchmarkPlan,
    EvaluationReport,
    paired_compare,
    run_benchmark,
    select_tau0,
)
from larf.forest import ForestConfig, fit_forest
from larf.models import ModelVariant, TrainedModel, fit_model

SCHEMA_VERSION = 1
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a mapping at top level")
    return doc


def _check_keys(section: str, d: dict, allowed: set) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValidationError(f"unknown keys in '{section}': {sorted(unknown)}")


def load_schema(ref: str, base: Path) -> dict:
    """Schema descriptor by built-in name (e.g. ``boston``) or file path."""
    candidate = (base / ref) if not Path(ref).is_absolute() else Path(ref)
    if candidate.is_file():
        return _read_yaml(candidate)
    builtin = resources.files("larf") / "schemas" / f"{ref.lower()}.yaml"
    if builtin.is_file():
        return yaml.safe_load(builtin.read_text(encoding="utf-8"))
    raise ValidationError(f"unknown dataset schema {ref!r}")


@dataclass
class RunConfig:
    dataset: dict
    forest: ForestConfig
    model: dict
    eval: dict
    output: Optional[str]
    base: Path

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path("."), seed: Optional[int] = None) -> "RunConfig":
        _check_keys("config", doc, {"schema_version", "dataset", "forest", "model", "eval", "output"})
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")

        ds = dict(doc.get("dataset") or {})
        _check_keys("dataset", ds, {"generator", "csv", "schema", "target", "has_header", "feature_columns", "delimiter"})
        if ("generator" in ds) == ("csv" in ds):
            raise ValidationError("dataset needs exactly one of 'generator' or 'csv'")
        if "csv" in ds:
            if "schema" in ds:
                schema = load_schema(ds.pop("schema"), base)
                for key in ("target", "has_header", "feature_columns", "delimiter"):
                    if key in schema:
                        ds.setdefault(key, schema[key])
            csv_path = Path(ds["csv"])
            if not csv_path.is_absolute():
                csv_path = base / csv_path
            if not csv_path.is_file():
                raise ValidationError(f"dataset file not found: {csv_path}")
            ds["csv"] = str(csv_path)
            ds.setdefault("target", -1)
            ds.setdefault("has_header", True)
        else:
            gen = dict(ds["generator"])
            if seed is not None:
                gen["seed"] = seed
            spec = GeneratorSpec(**gen)
            ds["generator"] = {"kind": spec.kind.value, "n": spec.n, "m": spec.m, "noise_sd": spec.noise_sd, "seed": spec.seed}

        forest_doc = dict(doc.get("forest") or {})
        _check_keys("forest", forest_doc, set(ForestConfig.__dataclass_fields__))
        if seed is not None:
            forest_doc["rng_seed"] = seed
        forest = ForestConfig(**forest_doc)

        model = dict(doc.get("model") or {})
        _check_keys("model", model, {"variant", "M", "slab_lower", "fixed_epsilon", "tau0", "tau0_grid", "tol", "max_iter"})
        try:
            model["variant"] = ModelVariant(model.get("variant", ModelVariant.EPS_M_W_LARF.value)).value
        except ValueError:
            raise ValidationError(
                f"unknown model variant {model['variant']!r}; choose from {[v.value for v in ModelVariant]}"
            ) from None
        model.setdefault("M", 10)
        model.setdefault("slab_lower", qp.DEFAULT_SLAB_LOWER)
        model.setdefault("fixed_epsilon", None)
        model.setdefault("tol", qp.DEFAULT_TOL)
        model.setdefault("max_iter", qp.DEFAULT_MAX_ITER)
        if "tau0" in model and "tau0_grid" in model:
            raise ValidationError("model: give either 'tau0' or 'tau0_grid', not both")
        if "tau0" not in model:
            model["tau0_grid"] = [float(t) for t in model.get("tau0_grid", DEFAULT_TAU0_GRID)]
        KernelParams(model.get("tau0", 1.0), default_taus(int(model["M"])))

        ev = dict(doc.get("eval") or {})
        _check_keys("eval", ev, {"train_fraction", "folds", "seed", "repeats"})
        ev.setdefault("train_fraction", 0.8)
        ev.setdefault("folds", 3)
        ev.setdefault("seed", 0)
        ev.setdefault("repeats", 10)
        if seed is not None:
            ev["seed"] = seed
        SplitSpec(ev["train_fraction"], ev["seed"], ev["folds"])
        return cls(ds, forest, model, ev, doc.get("output"), base)

    def resolved(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "forest": self.forest.to_dict(),
            "model": self.model,
            "eval": self.eval,
            "output": self.output,
        }

    def load_dataset(self) -> Dataset:
        if "generator" in self.dataset:
            return generate(GeneratorSpec(**self.dataset["generator"]))
        d = self.dataset
        return load_csv(d["csv"], d["target"], d["has_header"], d.get("feature_columns"), d.get("delimiter", ","))


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("LARF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"LARF_THREADS must be an integer, got {env!r}") from None
    return 1


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump_yaml(doc: dict) -> str:
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=None)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.config:
        doc = _read_yaml(args.config)
        gen = dict((doc.get("dataset") or {}).get("generator") or {})
        if not gen:
            raise ValidationError("config has no dataset.generator section")
    else:
        if not args.kind:
            raise ValidationError("generate needs --kind or --config")
        gen = {"kind": args.kind, "n": args.n, "seed": 0}
        if args.m is not None:
            gen["m"] = args.m
        if args.noise is not None:
            gen["noise_sd"] = args.noise
    if args.seed is not None:
        gen["seed"] = args.seed
    spec = GeneratorSpec(**gen)
    if not args.out:
        raise ValidationError("generate needs --out PATH")
    data = generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=f".{out.name}.")
    os.close(fd)
    write_csv(data, tmp)
    os.replace(tmp, out)
    print(f"wrote {data.n} rows x {data.m} features to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise ValidationError("train needs --config PATH")
    cfg_path = Path(args.config)
    cfg = RunConfig.from_dict(_read_yaml(cfg_path), cfg_path.parent, args.seed)
    out_dir = Path(args.out or cfg.output or "larf-run")
    threads = _threads(args)

    raw = cfg.load_dataset()
    m = cfg.model
    variant = ModelVariant(m["variant"])
    M = int(m["M"])
    if "tau0" in m:
        tau0 = float(m["tau0"])
    else:
        split_spec = SplitSpec(cfg.eval["train_fraction"], cfg.eval["seed"], cfg.eval["folds"])
        tau0 = select_tau0(raw, variant, cfg.forest, m["tau0_grid"], M, split_spec, m["slab_lower"])
    kernel = KernelParams(tau0, default_taus(M))
    transform, data = standardize(raw)
    forest = fit_forest(data, cfg.forest, n_jobs=threads)
    model = fit_model(
        variant,
        forest,
        data,
        kernel,
        m["slab_lower"],
        transform=transform,
        fixed_epsilon=m["fixed_epsilon"],
        tol=m["tol"],
        max_iter=m["max_iter"],
    )
    train_pred = model.predict(raw.features)
    gammas = model.params.gammas
    summary = {
        "variant": variant.value,
        "n_train": raw.n,
        "m": raw.m,
        "tau0": tau0,
        "taus": list(kernel.taus),
        "training_mse": float(np.mean((raw.targets - train_pred) ** 2)),
        "baseline_training_mse": float(np.mean((raw.targets - forest.predict_baseline(data.features)) ** 2)),
        "epsilons": model.params.epsilons.tolist(),
        "mean_epsilon": model.params.mean_epsilon,
        "gamma_sparsity": float(np.mean(gammas <= 1e-12)),
        "solver": model.solver,
    }
    _write_atomic(out_dir / "model.json", model.to_json())
    _write_atomic(out_dir / "summary.json", json.dumps(summary, sort_keys=True, indent=1))
    _write_atomic(out_dir / "config.resolved.yaml", _dump_yaml(cfg.resolved()))
    print(f"variant {variant.value}  tau0={tau0:g}  training MSE={summary['training_mse']:.6g}")
    print("epsilons: " + " ".join(f"{e:.4f}" for e in summary["epsilons"]))
    print(f"model written to {out_dir / 'model.json'}")
    return EXIT_OK


def _read_feature_rows(path: Path, has_header: bool, target: Optional[str]) -> np.ndarray:
    """Feature matrix of a prediction CSV, optionally dropping a target column."""
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    header = [h.strip() for h in rows.pop(0)] if has_header and rows else None
    n_cols = len(header) if header is not None else (len(rows[0]) if rows else 0)
    drop = None
    if target is not None:
        if header is not None and target in header:
            drop = header.index(target)
        else:
            try:
                drop = int(target) % max(n_cols, 1)
            except ValueError:
                raise ValidationError(f"{path}: column {target!r} not found") from None
    keep = [j for j in range(n_cols) if j != drop]
    out = np.empty((len(rows), len(keep)))
    first = 2 if header is not None else 1
    for i, r in enumerate(rows):
        if len(r) != n_cols:
            raise ValidationError(f"{path}: row {i + first} has {len(r)} fields, expected {n_cols}")
        for k, j in enumerate(keep):
            try:
                out[i, k] = float(r[j])
            except ValueError:
                raise ValidationError(
                    f"{path}: non-numeric value {r[j]!r} at row {i + first}, column {j + 1}"
                ) from None
    return out


def cmd_predict(args) -> int:
    if not args.model or not args.data:
        raise ValidationError("predict needs --model PATH and --data CSV")
    model_path, data_path = Path(args.model), Path(args.data)
    for p in (model_path, data_path):
        if not p.is_file():
            raise ValidationError(f"file not found: {p}")
    model = TrainedModel.from_json(model_path.read_text(encoding="utf-8"))
    X = _read_feature_rows(data_path, not args.no_header, args.target)
    expected = model.forest.n_features
    if X.shape[1] != expected and not (X.shape[0] == 0 and X.shape[1] == 0):
        raise ValidationError(f"dimension mismatch: model expects m={expected} features, file has m={X.shape[1]}")
    preds = model.predict(X) if X.shape[0] else np.empty(0)
    text = "prediction\n" + "".join(f"{p!r}\n" for p in preds.tolist())
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def load_plan(path: Path, seed: Optional[int] = None) -> BenchmarkPlan:
    doc = _read_yaml(path)
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
    doc.pop("output", None)
    datasets = []
    for ds in doc.get("datasets") or []:
        ds = dict(ds)
        if "schema" in ds:
            schema = load_schema(ds.pop("schema"), path.parent)
            for key in ("target", "has_header", "feature_columns"):
                if key in schema:
                    ds.setdefault(key, schema[key])
            ds.setdefault("name", schema.get("name"))
        if "csv" in ds:
            p = Path(ds["csv"])
            p = p if p.is_absolute() else path.parent / p
            if not p.is_file():
                raise ValidationError(f"dataset file not found: {p}")
            ds["csv"] = str(p)
        datasets.append(ds)
    doc["datasets"] = datasets
    if seed is not None:
        doc["base_seed"] = seed
    try:
        return BenchmarkPlan.from_dict(doc)
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid benchmark plan: {exc}") from None


def cmd_benchmark(args) -> int:
    if not args.config:
        raise ValidationError("benchmark needs --config PLAN")
    plan_path = Path(args.config)
    plan = load_plan(plan_path, args.seed)
    raw_doc = _read_yaml(plan_path)
    out_dir = Path(args.out or raw_doc.get("output") or "larf-benchmark")
    report = run_benchmark(plan, workers=_threads(args))
    ok = [c for c in report.cells if "error" not in c]
    _write_atomic(out_dir / "report.json", report.to_json())
    _write_atomic(out_dir / "report.txt", report.to_table("r2") + "\n" + report.to_table("mae"))
    _write_atomic(out_dir / "plan.resolved.yaml", _dump_yaml({"schema_version": SCHEMA_VERSION, **plan.to_dict()}))
    _write_atomic(out_dir / "timings.json", json.dumps(report.timings, sort_keys=True, indent=1))
    print(report.to_table("r2"))
    failed = [c for c in report.cells if "error" in c]
    for c in failed:
        print(f"FAILED {c['dataset']}/{c['kind']}/repeat {c['repeat']}: {c['error']}", file=sys.stderr)
    print(f"{len(ok)}/{len(report.cells)} cells succeeded; report in {out_dir}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_compare(args) -> int:
    if not args.report or not args.a or not args.b:
        raise ValidationError("compare needs --report PATH --a MODEL --b MODEL")
    path = Path(args.report)
    if not path.is_file():
        raise ValidationError(f"report not found: {path}")
    report = EvaluationReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    result = paired_compare(report, args.a, args.b, args.metric)
    width = max(len(d) for d in result.datasets)
    for ds, delta in zip(result.datasets, result.deltas):
        print(f"{ds.ljust(width)}  {delta:+.4f}")
    flag = "  (zero-variance deltas; t capped)" if result.degenerate else ""
    print(f"t = {result.t:.6g}  df = {result.df}  p = {result.p_value:.4g}{flag}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (train) or benchmark plan (benchmark)")
    common.add_argument("--out", help="output directory (train/benchmark) or file (generate/predict)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, help="worker count (default: $LARF_THREADS or 1)")

    parser = argparse.ArgumentParser(prog="larf", description="Two-level attention-based random forests.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset as CSV")
    g.add_argument("--kind", choices=["friedman1", "friedman2", "friedman3", "regression", "sparse"])
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--m", type=int)
    g.add_argument("--noise", type=float)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="fit a forest and attention model")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict rows of a CSV with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", help="column (name or index) to drop before predicting")
    p.add_argument("--no-header", action="store_true")
    p.set_defaults(func=cmd_predict)

    b = sub.add_parser("benchmark", parents=[common], help="run a benchmark plan")
    b.set_defaults(func=cmd_benchmark)

    c = sub.add_parser("compare", parents=[common], help="paired t-test between two models of a report")
    c.add_argument("--report", required=True)
    c.add_argument("--a", required=True, help="KIND/MODEL, e.g. RF/eM-w-LARF or ERT/best")
    c.add_argument("--b", required=True)
    c.add_argument("--metric", choices=["r2", "mae"], default="r2")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LarfError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
