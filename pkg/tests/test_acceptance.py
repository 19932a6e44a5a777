"""Acceptance criteria, one named group per criterion.

The pass/fail line for each group is printed in the terminal summary (see
``conftest.py``). The desk-scale benchmark groups share one module-scoped run
of Friedman 1/2/3 with RF and ERT forests over 10 seeds.
"""

import json
import math
import time

import numpy as np
import pytest
import yaml

from larf import qp
from larf.attention import KernelParams, compute_features, default_taus, softmax_neg_sq_dist
from larf.cli import main
from larf.data import GeneratorSpec, generate, standardize
from larf.evaluation import BenchmarkPlan, paired_t, run_benchmark
from larf.forest import ForestConfig, fit_forest
from larf.models import ModelVariant, build_problem, fit_model, params_from_solution, predict_from_features

from oracles import grid_min, random_feasible

QP = "QP oracle equivalence"
NORM = "Attention-weight normalization"
REDUCE = "Reduction checks"
DOMINANCE = "Training-objective dominance"
TABLE3 = "Directional reproduction of the RF comparison table"
ERT = "ERT parity"
PAIRED = "Paired t statistic"
DETERMINISM = "Determinism of command artifacts"

ALL_VARIANTS = list(ModelVariant)
FRIEDMAN = ("friedman1", "friedman2", "friedman3")


def _fitted(kind, n=100, seed=0, n_trees=100, M=10, tau0=1.0):
    raw = generate(GeneratorSpec(kind, n=n, seed=seed))
    transform, data = standardize(raw)
    forest = fit_forest(data, ForestConfig(n_trees=n_trees, rng_seed=seed))
    return raw, transform, data, forest, KernelParams.with_default_taus(tau0, M)


# ---------------------------------------------------------------------------
# QP oracle equivalence
# ---------------------------------------------------------------------------

QP_FAMILIES = {
    "UnitSimplex": lambda p: qp.UnitSimplex(p),
    "SlabSimplex": lambda p: qp.SlabSimplex(p, 1e-3, 1.0),
    "BoxScalar": lambda p: qp.BoxScalar(p, 1e-3, 1.0),
    "BlockSlabSimplex(M=1,T=3)": lambda p: qp.BlockSlabSimplex(1, 3, 1e-3, 1.0),
}
QP_PROBLEMS_PER_FAMILY = 50


class TestQpOracle:
    elapsed = 0.0

    @pytest.mark.acceptance(QP)
    @pytest.mark.parametrize("family", list(QP_FAMILIES))
    def test_solver_matches_grid(self, family):
        start = time.perf_counter()
        rng = np.random.default_rng(sorted(QP_FAMILIES).index(family))
        worst = -np.inf
        for i in range(QP_PROBLEMS_PER_FAMILY):
            p = 1 + i % 3
            con = QP_FAMILIES[family](p)
            n_rows = int(rng.integers(1, 9))
            prob = qp.QuadraticProblem(rng.normal(size=n_rows) * 2, rng.normal(size=(n_rows, con.n_variables)), con)
            sol = qp.solve(prob)
            assert con.violation(sol.variables) <= 1e-9
            worst = max(worst, sol.objective - grid_min(prob))
        TestQpOracle.elapsed += time.perf_counter() - start
        assert worst <= 1e-6, f"solver exceeded grid oracle by {worst:.3g}"

    @pytest.mark.acceptance(QP)
    def test_runtime(self):
        assert TestQpOracle.elapsed < 60.0, f"{TestQpOracle.elapsed:.1f} s"


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@pytest.mark.acceptance(NORM)
def test_normalization_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    pairs = 0
    worst_sum, worst_min = 0.0, np.inf
    for d_i, kind in enumerate(("friedman1", "friedman2", "sparse", "regression", "friedman3")):
        raw, transform, data, forest, _ = _fitted(kind, n=60, seed=d_i, n_trees=20)
        kernel = KernelParams.with_default_taus(float(10.0 ** rng.integers(-2, 3)), int(rng.integers(1, 11)))
        for v in ALL_VARIANTS:
            model = fit_model(v, forest, data, kernel, transform=transform)
            # Mix of in-range, far-away and training rows.
            X = np.vstack(
                [
                    raw.features[rng.choice(raw.n, 10)],
                    rng.normal(size=(30, raw.m)) * raw.features.std(axis=0) * 5 + raw.features.mean(axis=0),
                    rng.uniform(-1e3, 1e3, size=(10, raw.m)),
                ]
            )
            alpha = model.attention_weights(X)
            worst_sum = max(worst_sum, float(np.abs(alpha.sum(axis=1) - 1).max()))
            worst_min = min(worst_min, float(alpha.min()))
            pairs += X.shape[0]
    elapsed = time.perf_counter() - start
    assert pairs >= 1000
    assert worst_sum <= 1e-10, worst_sum
    assert worst_min >= -1e-12, worst_min
    assert elapsed < 30.0, f"{elapsed:.1f} s"


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


class TestReductions:
    @pytest.mark.acceptance(REDUCE)
    @pytest.mark.parametrize("kind", FRIEDMAN)
    def test_huge_tau0_larf_equals_arf(self, kind):
        raw, transform, data, forest, _ = _fitted(kind)
        kernel = KernelParams.with_default_taus(1e9, 10)
        X = np.vstack([raw.features, np.random.default_rng(1).uniform(raw.features.min(0), raw.features.max(0), (50, raw.m))])
        # Features and predictions carry the units of y; compare on the target scale.
        scale = max(1.0, float(np.abs(raw.targets).max()))
        for arf, larf in (("eM-ARF", "eM-LARF"), ("eM-w-ARF", "eM-w-LARF")):
            ma = fit_model(arf, forest, data, kernel, transform=transform)
            mb = fit_model(larf, forest, data, kernel, transform=transform)
            fa, fb = ma.features(X), mb.features(X)
            assert np.abs(fa.sigma - fb.sigma).max() <= 1e-6
            assert np.abs(fa.D - fb.D).max() / scale <= 1e-6
            assert np.abs(fa.C - fb.C).max() / scale <= 1e-6
            assert np.abs(ma.predict(X) - mb.predict(X)).max() / scale <= 1e-6

    @pytest.mark.acceptance(REDUCE)
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_single_temperature_matches_single_contamination(self, variant):
        raw, transform, data, forest, _ = _fitted("friedman1", n=80, n_trees=30)
        kernel = KernelParams(0.5, (1.0,))
        model = fit_model(variant, forest, data, kernel, transform=transform)
        X = raw.features[:40]
        f = model.features(X)
        # Single-model path coded directly: softmax over trees, then (1 - eps) sigma + gamma.
        sigma = np.array([softmax_neg_sq_dist(row, 1.0) for row in f.key_sq_dist])
        np.testing.assert_array_equal(f.sigma[:, 0, :], sigma)
        np.testing.assert_array_equal(f.C[:, 0, :], f.D * sigma)
        eps, gam = model.params.epsilons[0], model.params.gammas[0]
        alpha = (1.0 - eps) * sigma + gam
        np.testing.assert_array_equal(model.attention_weights(X), alpha)
        np.testing.assert_array_equal(model.predict(X), np.einsum("st,st->s", alpha, f.D))
        if not variant.trainable_w:
            # Scalar contamination with uniform w has a closed-form optimum.
            ft = model.features(raw.features)
            eps_closed, _ = qp.solve_scalar_epsilon(ft.C[:, 0, :].sum(axis=1), ft.D.mean(axis=1), raw.targets, model.slab_lower)
            assert eps == pytest.approx(eps_closed, abs=1e-6)

    @pytest.mark.acceptance(REDUCE)
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_pinned_epsilon_is_near_softmax(self, variant):
        raw, transform, data, forest, kernel = _fitted("friedman2", n_trees=50)
        lower = qp.DEFAULT_SLAB_LOWER
        model = fit_model(variant, forest, data, kernel, lower, transform=transform, fixed_epsilon=lower)
        X = raw.features
        softmax_mixture = model.features(X).sigma.mean(axis=1)
        assert np.abs(model.attention_weights(X) - softmax_mixture).max() <= 2 * lower


# ---------------------------------------------------------------------------
# Training-objective dominance
# ---------------------------------------------------------------------------


@pytest.mark.acceptance(DOMINANCE)
@pytest.mark.parametrize("dataset", range(5))
def test_training_objective_dominance(dataset):
    rng = np.random.default_rng(100 + dataset)
    kind = ("friedman1", "friedman2", "friedman3", "sparse", "regression")[dataset]
    raw, transform, data, forest, _ = _fitted(kind, n=80, seed=dataset, n_trees=40)
    kernel = KernelParams.with_default_taus(float(10.0 ** (dataset - 2)), 1 + 2 * dataset)
    violations = 0
    y = data.targets
    # Comparisons are exact up to the rounding error of an MSE of targets this size.
    rounding = 1e-12 * float(np.mean(y**2))
    for variant in ALL_VARIANTS:
        f = compute_features(data.features, forest, data, kernel, variant.leaf_attention)
        model = fit_model(variant, forest, data, kernel, features=f)
        mse = float(((y - predict_from_features(f, model.params)) ** 2).mean())
        con = build_problem(variant, f, y).constraint
        for theta in random_feasible(con, rng, 100):
            params = params_from_solution(variant, theta, kernel.M, forest.n_trees)
            other = float(((y - predict_from_features(f, params)) ** 2).mean())
            violations += mse > other + rounding
    assert violations == 0


# ---------------------------------------------------------------------------
# Desk-scale benchmark (shared by the directional and ERT parity groups)
# ---------------------------------------------------------------------------

DESK_PLAN = dict(
    datasets=[{"name": k, "generator": {"kind": k, "n": 100}} for k in FRIEDMAN],
    variants=[v.value for v in ALL_VARIANTS],
    forest_kinds=["RF", "ERT"],
    M=10,
    repeats=10,
    n_trees=100,
    min_leaf_size=10,
)


@pytest.fixture(scope="module")
def desk_report():
    start = time.perf_counter()
    report = run_benchmark(BenchmarkPlan(**DESK_PLAN))
    elapsed = time.perf_counter() - start
    print(f"\ndesk-scale benchmark: {elapsed:.1f} s")
    print(report.to_table("r2"))
    return report, elapsed


@pytest.mark.slow
class TestDeskScale:
    @pytest.mark.acceptance(TABLE3)
    def test_cells_complete(self, desk_report):
        report, _ = desk_report
        assert not [c for c in report.cells if "error" in c]
        for row in report.rows:
            assert len(row["seeds"]) == 10

    @pytest.mark.acceptance(TABLE3)
    @pytest.mark.parametrize("dataset", FRIEDMAN)
    def test_w_larf_beats_forest(self, desk_report, dataset):
        report, _ = desk_report
        assert report.mean_r2(dataset, "RF", "eM-w-LARF") > report.mean_r2(dataset, "RF", "RF")

    @pytest.mark.acceptance(TABLE3)
    def test_w_larf_at_least_w_arf_on_two_of_three(self, desk_report):
        report, _ = desk_report
        wins = sum(report.mean_r2(d, "RF", "eM-w-LARF") >= report.mean_r2(d, "RF", "eM-w-ARF") for d in FRIEDMAN)
        assert wins >= 2

    @pytest.mark.acceptance(TABLE3)
    def test_friedman2_gap(self, desk_report):
        report, _ = desk_report
        gap = report.mean_r2("friedman2", "RF", "eM-w-LARF") - report.mean_r2("friedman2", "RF", "RF")
        assert gap >= 0.03, gap

    @pytest.mark.acceptance(TABLE3)
    def test_runtime(self, desk_report):
        # Covers RF and ERT together, so the RF half is well inside the target.
        _, elapsed = desk_report
        assert elapsed < 15 * 60

    @pytest.mark.acceptance(ERT)
    def test_best_of_variants_close_to_rf(self, desk_report):
        report, _ = desk_report
        names = [v.value for v in ALL_VARIANTS]
        diffs = []
        for d in FRIEDMAN:
            best_rf = max(report.mean_r2(d, "RF", m) for m in names)
            best_ert = max(report.mean_r2(d, "ERT", m) for m in names)
            diffs.append(abs(best_ert - best_rf))
        assert float(np.mean(diffs)) < 0.1, diffs


# ---------------------------------------------------------------------------
# Paired t statistic
# ---------------------------------------------------------------------------


@pytest.mark.acceptance(PAIRED)
def test_paired_t_hand_computed():
    deltas = [0.092, 0.041, -0.013, 0.027, 0.064, 0.005, 0.038, 0.019, -0.002, 0.051, 0.030]
    n = len(deltas)
    mean = math.fsum(deltas) / n
    sd = math.sqrt(math.fsum((d - mean) ** 2 for d in deltas) / (n - 1))
    res = paired_t(deltas)
    assert res.df == n - 1
    assert abs(res.t - mean / (sd / math.sqrt(n))) <= 1e-9


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------


def _run_all_commands(root, capsys):
    root.mkdir()
    cfg = root / "cfg.yaml"
    cfg.write_text(
        yaml.safe_dump(
            {
                "schema_version": 1,
                "dataset": {"generator": {"kind": "friedman2", "n": 60, "seed": 4}},
                "forest": {"n_trees": 10, "min_leaf_size": 5, "kind": "ERT"},
                "model": {"variant": "eM-w-LARF", "M": 4, "tau0_grid": [0.1, 1.0, 10.0]},
            }
        )
    )
    plan = root / "plan.yaml"
    plan.write_text(
        yaml.safe_dump(
            {
                "schema_version": 1,
                "datasets": [
                    {"name": "F1", "generator": {"kind": "friedman1", "n": 50}},
                    {"name": "F3", "generator": {"kind": "friedman3", "n": 50}},
                ],
                "forest_kinds": ["RF", "ERT"],
                "variants": ["eM-ARF", "eM-w-LARF"],
                "M": 3,
                "tau0_grid": [0.1, 10.0],
                "repeats": 2,
                "n_trees": 8,
                "min_leaf_size": 5,
            }
        )
    )
    codes = [
        main(["generate", "--config", str(cfg), "--out", str(root / "data.csv")]),
        main(["train", "--config", str(cfg), "--out", str(root / "train")]),
        main(["predict", "--model", str(root / "train" / "model.json"), "--data", str(root / "data.csv"),
              "--target", "y", "--out", str(root / "pred.csv")]),
        main(["benchmark", "--config", str(plan), "--out", str(root / "bench")]),
    ]
    capsys.readouterr()
    codes.append(main(["compare", "--report", str(root / "bench" / "report.json"), "--a", "ERT/best", "--b", "RF/best"]))
    (root / "compare.txt").write_text(capsys.readouterr().out)
    assert codes == [0] * 5
    return [
        "data.csv",
        "train/model.json",
        "train/summary.json",
        "train/config.resolved.yaml",
        "pred.csv",
        "bench/report.json",
        "bench/report.txt",
        "bench/plan.resolved.yaml",
        "compare.txt",
    ]


@pytest.mark.acceptance(DETERMINISM)
def test_commands_are_byte_identical(tmp_path, capsys):
    files = _run_all_commands(tmp_path / "a", capsys)
    _run_all_commands(tmp_path / "b", capsys)
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    summary = json.loads((tmp_path / "a" / "train" / "summary.json").read_text())
    assert summary["tau0"] in (0.1, 1.0, 10.0)


@pytest.mark.acceptance(DETERMINISM)
def test_forest_serialization_is_byte_identical():
    data = generate(GeneratorSpec("friedman1", n=100, seed=0))
    cfg = ForestConfig(n_trees=100, rng_seed=0)
    assert fit_forest(data, cfg).to_json() == fit_forest(data, cfg, n_jobs=2).to_json()


@pytest.mark.acceptance(DETERMINISM)
def test_benchmark_report_independent_of_workers():
    plan = BenchmarkPlan(
        datasets=[{"name": "F2", "generator": {"kind": "friedman2", "n": 50}}],
        variants=["eM-LARF"], M=2, tau0_grid=(1.0, 10.0), repeats=2, n_trees=6, min_leaf_size=5,
    )
    assert run_benchmark(plan, workers=1).to_json() == run_benchmark(plan, workers=2).to_json()
