import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from larf.data import Dataset, GeneratorSpec, generate, standardize  # noqa: E402
from larf.forest import ForestConfig, fit_forest  # noqa: E402


@pytest.fixture(scope="session")
def friedman1_small():
    return generate(GeneratorSpec("friedman1", n=60, seed=3))


@pytest.fixture(scope="session")
def standardized_small(friedman1_small):
    return standardize(friedman1_small)[1]


@pytest.fixture(scope="session")
def small_forest(standardized_small):
    return fit_forest(standardized_small, ForestConfig(n_trees=6, min_leaf_size=5, rng_seed=1))


@pytest.fixture
def toy_dataset():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    return Dataset(X, X[:, 0] - 2 * X[:, 1] + 0.1 * rng.normal(size=30))


# -- acceptance reporting ---------------------------------------------------
# Tests tagged ``@pytest.mark.acceptance("name")`` are grouped by name; a
# criterion passes only if every test carrying its name passed.

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    results = _ACCEPTANCE.setdefault(marker.args[0], {})
    if rep.when == "call":
        results[item.nodeid] = rep.passed
    elif not rep.passed:
        results[item.nodeid] = False


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, results in _ACCEPTANCE.items():
        ok = all(results.values())
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({sum(results.values())}/{len(results)} checks)")
