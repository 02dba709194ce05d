import numpy as np
import pytest

from strgode.graphs import RelationGraph, TriGraph, build_physical
from strgode.model import ModelParams


def small_trigraph(n=4, seed=0):
    rng = np.random.default_rng(seed)
    phys = build_physical([(i, i + 1) for i in range(n - 1)], n)
    graphs = []
    for kind in ("similarity", "correlation"):
        edges = []
        for i in range(n):
            cols = [j for j in range(n) if j != i and rng.random() < 0.6]
            if cols:
                w = rng.random(len(cols)) + 0.1
                w /= w.sum()
                edges += [(i, j, float(x)) for j, x in zip(cols, w)]
        graphs.append(RelationGraph(n, tuple(edges), kind))
    return TriGraph(phys, *graphs)


def perturbed_params(d, seed, scale=0.3):
    params = ModelParams.init(d, seed)
    rng = np.random.default_rng(seed + 100)
    return ModelParams({k: v + scale * rng.normal(size=v.shape) for k, v in params.values.items()})


@pytest.fixture
def trigraph():
    return small_trigraph()


# acceptance verdicts, echoed once more at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
