import numpy as np
import pytest

from msgee import Cluster, SimConfig, StepFunction, StudyData, SubjectRecord, simulate_study


def subject(sid, changes, censor, x=(0.0,), initial=1):
    """Subject with state changes ``[(t, state), ...]`` and constant covariates."""
    path = StepFunction.from_changes(initial, [t for t, _ in changes], [v for _, v in changes])
    covs = tuple(StepFunction.constant(float(v)) for v in x)
    return SubjectRecord(sid, path, censor, covs)


def study(clusters, tau=2.0):
    cl = tuple(Cluster(cid, tuple(members)) for cid, members in clusters)
    return StudyData(cl, tau, (1, 2, 3), frozenset({3}))


@pytest.fixture
def tiny():
    """Two clusters of two subjects each, one covariate."""
    return study([
        (1, [subject(1, [(0.3, 2), (0.9, 1)], 1.5, x=(0.5,)),
             subject(2, [(0.5, 3)], 2.0, x=(-1.0,))]),
        (2, [subject(3, [(0.4, 2)], 1.2, x=(1.5,)),
             subject(4, [], 2.0, x=(0.0,))]),
    ])


@pytest.fixture(scope="session")
def sim_small():
    data, truth = simulate_study(SimConfig(n_clusters=30, rng_seed=11))
    return data, truth


@pytest.fixture(scope="session")
def sim_medium():
    data, truth = simulate_study(SimConfig(n_clusters=100, rng_seed=12))
    return data, truth


def random_slice_arrays(rng, m, p):
    x = np.column_stack([np.ones(m), rng.normal(0, 1, (m, p))])
    y = rng.uniform(size=m) < 0.5
    cluster = rng.integers(0, max(2, m // 3), m)
    return y, x, cluster


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
