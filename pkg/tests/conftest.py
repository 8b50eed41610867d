import numpy as np
import pytest

from geoflow import data
from geoflow.graph import build_graph


def path_graph(n, w=1.0):
    return build_graph(n, [(i, i + 1, w) for i in range(n - 1)])


def random_graph(rng, n, p=0.4):
    edges = [(i, j, float(rng.uniform(0.5, 2.0))) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return build_graph(n, edges)


def random_density(rng, n):
    q = rng.uniform(0.2, 1.0, n)
    return q / q.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def concept_ds():
    return data.gen_concept_shift(3, 60, 3, 2, 0.9)


@pytest.fixture(scope="session")
def covariate_ds():
    return data.gen_covariate_shift(5, 60, 3, 2, 1.0)
