"""Shared fixtures, plus the end-of-run acceptance summary."""

import pytest

from bilevelopt import (
    EpisodeSpec,
    Regularizer,
    RngStream,
    SyntheticGaussian,
    make_meta_feature_softmax,
    make_meta_init_mlp,
    make_quadratic,
    sample_task_batch,
)

DIM_IN = 5
WAY = 3

# one line per acceptance criterion, filled in by test_acceptance.py and
# echoed after the run so the verdicts are visible without -s
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_task():
    """One 3-way 2-shot episode with 4 query points per class."""
    source = SyntheticGaussian(
        num_classes=6, dim=DIM_IN, cluster_spread=3.0, noise_sd=0.6, seed=9
    )
    spec = EpisodeSpec(way=WAY, shot=2, query=4)
    return sample_task_batch(source, spec, RngStream(9, 77)).tasks[0]


@pytest.fixture
def small_batch():
    source = SyntheticGaussian(
        num_classes=6, dim=DIM_IN, cluster_spread=3.0, noise_sd=0.6, seed=9
    )
    spec = EpisodeSpec(way=WAY, shot=2, query=4, batch_size=3)
    return sample_task_batch(source, spec, RngStream(9, 78))


@pytest.fixture
def quad2():
    """2x2 quadratic with a well-conditioned, non-symmetric A."""
    return make_quadratic([[2.0, -0.7], [0.4, 1.5]], 1.0, [1.0, -0.5])


@pytest.fixture
def softmax_problem():
    return make_meta_feature_softmax(DIM_IN, 6, WAY, reg=Regularizer.l2(0.1))


@pytest.fixture
def mlp_problem():
    return make_meta_init_mlp(DIM_IN, 4, WAY, reg=Regularizer.l2(0.05))
