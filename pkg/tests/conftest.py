import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from rankformer.graph import random_graph, split_dataset, two_clique_interactions

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph():
    return random_graph(8, 12, 40, seed=7)


@pytest.fixture
def embeddings():
    """Float64 Gaussian embeddings; ``rows`` may be a graph (n + m rows)."""

    def make(rows, d: int, seed: int = 0) -> torch.Tensor:
        if not isinstance(rows, int):
            rows = rows.n + rows.m
        return torch.from_numpy(np.random.default_rng(seed).standard_normal((rows, d)))

    return make


@pytest.fixture(scope="session")
def clique_split():
    return split_dataset(two_clique_interactions(), seed=11)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record (and echo) one PASS/FAIL line for an acceptance criterion."""

    def record(criterion: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
