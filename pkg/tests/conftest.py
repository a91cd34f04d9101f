import numpy as np
import pytest

from gnas.graph import build_graph


def random_graph(rng, n=8, p=0.35, dim=3, connected=False, **kw):
    """Undirected G(n, p); with ``connected`` a random spanning path is added."""
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    if connected:
        order = rng.permutation(n)
        edges += [(int(order[i]), int(order[i + 1])) for i in range(n - 1)]
    return build_graph(n, edges, rng.uniform(-1, 1, size=(n, dim)), **kw)


def path_graph(values):
    values = np.asarray(values, dtype=float).reshape(len(values), -1)
    n = len(values)
    return build_graph(n, [(i, i + 1) for i in range(n - 1)], values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def path3():
    return path_graph([1.0, 2.0, 3.0])
