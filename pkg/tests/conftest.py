import numpy as np
import pytest

from kgraphctl import kernels
from kgraphctl.embedding import FeatureData
from kgraphctl.graph import generate_erdos_renyi


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    return request.param


def random_graph(rng, n_lo=2, n_hi=7, p=0.5):
    n = int(rng.integers(n_lo, n_hi + 1))
    return generate_erdos_renyi(n, p, int(rng.integers(1 << 30)))


def random_feature_data(rng, g, samples=40, d=3, d_a=2):
    return FeatureData(rng.normal(size=(samples, g.n, d)), rng.normal(size=(samples, g.n, d_a)),
                       rng.normal(size=(samples, g.n, d)))
