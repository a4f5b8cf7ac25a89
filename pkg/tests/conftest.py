import numpy as np
import pytest

from llmhni.data import from_pairs, split_dataset
from llmhni.synthetic import generate_corpus


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def tiny_pairs():
    return [(0, 0), (0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 3)]


@pytest.fixture
def tiny_dataset(tiny_pairs):
    return from_pairs(tiny_pairs, 4, 5)


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(seed=0)


@pytest.fixture(scope="session")
def split_corpus(corpus):
    return split_dataset(corpus.dataset, (0.6, 0.2, 0.2), seed=0)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
