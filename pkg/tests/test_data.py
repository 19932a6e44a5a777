import math
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from larf.data import (
    Dataset,
    GeneratorSpec,
    SplitSpec,
    Standardizer,
    fold_indices,
    friedman1,
    friedman2,
    friedman3,
    generate,
    load_csv,
    sparse_uncorrelated,
    split,
    split_indices,
    standardize,
    write_csv,
)
from larf.errors import InvalidSpec, LengthMismatch, MissingTarget, ParseError, TooFewRows, ValidationError

SCHEMA_DIR = Path(__file__).parents[1] / "src" / "larf" / "schemas"


class TestDataset:
    def test_shapes(self):
        d = Dataset([[1.0, 2.0], [3.0, 4.0]], [0.0, 1.0])
        assert (d.n, d.m) == (2, 2)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            Dataset(np.zeros((3, 2)), np.zeros(2))

    def test_rejects_nan(self):
        with pytest.raises(ValidationError):
            Dataset([[1.0], [np.nan]], [0.0, 1.0])


class TestGenerators:
    def test_friedman1_closed_form(self):
        x = np.full((1, 10), 0.5)
        expected = 10 * math.sin(math.pi / 4) + 5 + 2.5
        assert friedman1(x)[0] == pytest.approx(expected, rel=1e-15)
        assert expected == pytest.approx(14.571, abs=1e-3)

    def test_sparse_closed_form(self):
        assert sparse_uncorrelated(np.array([[1.0, 1, 1, 1, 0, 0]]))[0] == -0.5

    @pytest.mark.parametrize("kind", ["friedman1", "friedman2", "friedman3", "regression", "sparse"])
    def test_deterministic_and_seeded(self, kind):
        a = generate(GeneratorSpec(kind, n=50, seed=1))
        b = generate(GeneratorSpec(kind, n=50, seed=1))
        c = generate(GeneratorSpec(kind, n=50, seed=2))
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.targets, b.targets)
        assert not np.array_equal(a.targets, c.targets)

    @pytest.mark.parametrize("kind,m", [("friedman1", 10), ("friedman2", 4), ("friedman3", 4), ("regression", 100), ("sparse", 10)])
    def test_default_dimensions(self, kind, m):
        assert generate(GeneratorSpec(kind)).features.shape == (100, m)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_noise_free_matches_inline_formulas(self, seed):
        X = generate(GeneratorSpec("friedman1", n=20, noise_sd=0, seed=seed))
        x = X.features
        inline = [10 * math.sin(math.pi * r[0] * r[1]) + 20 * (r[2] - 0.5) ** 2 + 10 * r[3] + 5 * r[4] for r in x]
        np.testing.assert_allclose(X.targets, inline, rtol=1e-13)
        F2 = generate(GeneratorSpec("friedman2", n=20, noise_sd=0, seed=seed))
        F3 = generate(GeneratorSpec("friedman3", n=20, noise_sd=0, seed=seed))
        for r, y2, y3 in zip(F2.features, F2.targets, F3.targets):
            assert 0 <= r[0] <= 100 and 40 * math.pi <= r[1] <= 560 * math.pi
            assert 0 <= r[2] <= 1 and 1 <= r[3] <= 11
            inner = r[1] * r[2] - 1 / (r[1] * r[3])
            assert y2 == pytest.approx(math.sqrt(r[0] ** 2 + inner**2), rel=1e-13)
        for r, y3 in zip(F3.features, F3.targets):
            inner = r[1] * r[2] - 1 / (r[1] * r[3])
            assert y3 == pytest.approx(math.atan(inner / r[0]), rel=1e-12)
        S = generate(GeneratorSpec("sparse", n=20, noise_sd=0, seed=seed))
        np.testing.assert_allclose(S.targets, [r[0] + 2 * r[1] - 2 * r[2] - 1.5 * r[3] for r in S.features], rtol=1e-13, atol=1e-14)

    def test_regression_is_linear(self):
        d = generate(GeneratorSpec("regression", n=150, m=5, noise_sd=0, seed=0))
        beta, *_ = np.linalg.lstsq(d.features, d.targets, rcond=None)
        np.testing.assert_allclose(d.features @ beta, d.targets, atol=1e-9)

    def test_helpers_agree_with_generate(self):
        d = generate(GeneratorSpec("friedman2", n=10, noise_sd=0, seed=0))
        np.testing.assert_array_equal(friedman2(d.features), d.targets)
        d = generate(GeneratorSpec("friedman3", n=10, noise_sd=0, seed=0))
        np.testing.assert_array_equal(friedman3(d.features), d.targets)

    @pytest.mark.parametrize("kw", [{"kind": "friedman2", "m": 5}, {"kind": "friedman1", "n": 0}, {"kind": "sparse", "noise_sd": -1}, {"kind": "bogus"}])
    def test_invalid(self, kw):
        with pytest.raises((InvalidSpec, ValueError)):
            GeneratorSpec(**kw)


class TestCsv:
    def test_basic(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
        d = load_csv(p)
        assert d.n == 3 and d.feature_names == ("a", "b")
        np.testing.assert_array_equal(d.targets, [3, 6, 9])

    def test_blank_cell(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("a,b,y\n1,2,3\n4,,6\n")
        with pytest.raises(ParseError) as err:
            load_csv(p)
        assert (err.value.row, err.value.col) == (3, 2)

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("1,2,x\n")
        with pytest.raises(ParseError) as err:
            load_csv(p, has_header=False)
        assert (err.value.row, err.value.col) == (1, 3)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("a,y\n1,2\n1\n")
        with pytest.raises(ParseError):
            load_csv(p)

    def test_missing_target(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("a,b\n1,2\n3,4\n")
        with pytest.raises(MissingTarget):
            load_csv(p, target_column="y")

    def test_named_target_and_features(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("y,a,junk,b\n1,2,0,3\n4,5,0,6\n")
        d = load_csv(p, target_column="y", feature_columns=["a", "b"])
        np.testing.assert_array_equal(d.features, [[2, 3], [5, 6]])

    def test_round_trip_is_exact(self, tmp_path):
        d = generate(GeneratorSpec("friedman1", n=30, seed=5))
        write_csv(d, tmp_path / "f.csv")
        back = load_csv(tmp_path / "f.csv")
        np.testing.assert_array_equal(back.features, d.features)
        np.testing.assert_array_equal(back.targets, d.targets)

    def test_boston_layout(self, tmp_path):
        schema = yaml.safe_load((SCHEMA_DIR / "boston.yaml").read_text())
        rng = np.random.default_rng(0)
        cols = schema["feature_columns"] + [schema["target"]]
        p = tmp_path / "boston.csv"
        rows = rng.uniform(size=(506, len(cols)))
        p.write_text(",".join(cols) + "\n" + "\n".join(",".join(repr(v) for v in r) for r in rows.tolist()) + "\n")
        d = load_csv(p, schema["target"], schema["has_header"], schema["feature_columns"])
        assert (d.n, d.m) == (schema["expected"]["n"], schema["expected"]["m"]) == (506, 13)

    @pytest.mark.parametrize("name", ["boston", "wine", "concrete", "yacht", "airfoil", "diabetes"])
    def test_schema_descriptors_are_complete(self, name):
        schema = yaml.safe_load((SCHEMA_DIR / f"{name}.yaml").read_text())
        assert "target" in schema and "expected" in schema


class TestSplit:
    def test_sizes(self):
        tr, te = split_indices(10, SplitSpec(0.8, seed=0))
        assert (tr.size, te.size) == (8, 2)

    def test_folds(self):
        folds = fold_indices(10, 3, seed=0)
        assert sorted(v.size for _, v in folds) == [3, 3, 4]

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(3, 300), k=st.integers(2, 5), seed=st.integers(0, 1000))
    def test_partitions(self, n, k, seed):
        tr, te = split_indices(n, SplitSpec(seed=seed))
        assert np.intersect1d(tr, te).size == 0
        np.testing.assert_array_equal(np.union1d(tr, te), np.arange(n))
        if n >= k:
            folds = fold_indices(n, k, seed)
            vals = np.concatenate([v for _, v in folds])
            np.testing.assert_array_equal(np.sort(vals), np.arange(n))
            sizes = [v.size for _, v in folds]
            assert max(sizes) - min(sizes) <= 1
            for t, v in folds:
                assert np.intersect1d(t, v).size == 0 and t.size + v.size == n

    def test_split_is_deterministic(self):
        d = generate(GeneratorSpec("sparse", n=40))
        a, _ = split(d, SplitSpec(seed=3))
        b, _ = split(d, SplitSpec(seed=3))
        np.testing.assert_array_equal(a.features, b.features)

    def test_too_few(self):
        with pytest.raises(TooFewRows):
            fold_indices(2, 3, 0)
        with pytest.raises(InvalidSpec):
            SplitSpec(train_fraction=1.0)


class TestStandardize:
    def test_hand_example(self):
        t, d = standardize(Dataset([[1.0], [3.0]], [0.0, 0.0]))
        np.testing.assert_array_equal(d.features[:, 0], [-1.0, 1.0])

    def test_constant_column(self):
        _, d = standardize(Dataset([[1.0, 7.0], [3.0, 7.0], [2.0, 7.0]], [0.0, 0.0, 1.0]))
        np.testing.assert_array_equal(d.features[:, 1], 0.0)

    def test_apply_reproduces_rows(self, friedman1_small):
        t, d = standardize(friedman1_small)
        np.testing.assert_array_equal(t.apply(friedman1_small.features[3]), d.features[3])
        again = Standardizer.from_dict(t.to_dict())
        np.testing.assert_array_equal(again.apply(friedman1_small.features), d.features)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10000), n=st.integers(2, 60))
    def test_moments(self, seed, n):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 3)) * [1e-3, 1.0, 1e4] + [5.0, -2.0, 1e5]
        _, d = standardize(Dataset(X, np.zeros(n)))
        assert np.abs(d.features.mean(axis=0)).max() < 1e-10
        assert np.abs(d.features.std(axis=0) - 1).max() < 1e-10
