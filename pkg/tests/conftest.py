import numpy as np
import pytest

from extract_lab import graphcore as gc


@pytest.fixture
def tiny_graph():
    """12 nodes, 5 features, two loose communities."""
    return gc.generate_sbm(2, 6, 0.5, 0.1, 5, 1.0, seed=3)


@pytest.fixture
def blobs():
    """Two well separated SBM blobs (disjoint, strongly shifted features)."""
    return gc.generate_sbm(2, 40, 0.3, 0.0, 4, 8.0, seed=11)


def random_graph(seed: int, n: int = 14, d: int = 6, p: float = 0.3) -> gc.Graph:
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < p, 1)
    edges = np.argwhere(upper)
    x = rng.normal(size=(n, d))
    y = rng.integers(0, 3, n)
    return gc.Graph(x, edges, y, 3)
