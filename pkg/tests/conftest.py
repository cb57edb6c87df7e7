import numpy as np
import pytest
from hypothesis import settings

from fincache.demand import DemandMatrix, build_demand, weibull_popularity
from fincache.game import make_game
from fincache.topology import Topology, gen_er

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_game(seed, n=3, K=3, capacity=1, radius=1, p=0.7, discount="hop", scale=5.0,
                perturb=0.5):
    """Connected ER game with perturbed Weibull demand."""
    rng = np.random.default_rng(seed)
    for _ in range(50):
        t = gen_er(n, p, int(rng.integers(1 << 30)))
        if n == 1 or t.edge_count >= n - 1:
            break
    d = build_demand(t, weibull_popularity(K, scale=scale), perturb=perturb,
                     seed=int(rng.integers(1 << 30)))
    return make_game(t, d, capacity, radius, discount=discount)


def line_game(w, capacity=1, radius=1, discount="hop"):
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    edges = np.array([[i, i + 1] for i in range(n - 1)]).reshape(-1, 2)
    return make_game(Topology(n, edges), DemandMatrix(w), capacity, radius, discount=discount)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
