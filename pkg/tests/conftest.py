import numpy as np
import pytest

from underreport.areal_data import ArealDataset, Graph
from underreport.synthetic import SimDesign, simulate

ACCEPTANCE_LINES = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_dataset(y=(3, 0, 5, 2), n_pop=(1000, 2000, 1500, 800), edges=((0, 1), (1, 2), (2, 3)), cov=None,
                 w=None):
    n = len(y)
    cov = np.arange(n, dtype=float)[:, None] if cov is None else np.asarray(cov, dtype=float)
    return ArealDataset(area_ids=[f"a{i}" for i in range(n)], y=np.array(y), n_pop=np.array(n_pop),
                        covariates_raw=cov, covariate_names=[f"x{j + 1}" for j in range(cov.shape[1])],
                        graph=Graph(n, np.array(edges)),
                        proxy_w=np.linspace(10.0, 90.0, n) if w is None else np.asarray(w, dtype=float))


@pytest.fixture
def tiny():
    return tiny_dataset()


@pytest.fixture(scope="session")
def sim_clustering():
    return simulate(SimDesign(rows=5, cols=5, seed=11))


@pytest.fixture(scope="session")
def sim_pogit():
    return simulate(SimDesign(rows=5, cols=5, seed=12, mechanism="pogit"))


def batch_means_se(series, n_batches: int = 25) -> float:
    """Monte Carlo standard error of the mean of an autocorrelated series."""
    x = np.asarray(series, dtype=float)
    b = len(x) // n_batches
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))
