import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import sparse

from kgraphctl import kernels
from kgraphctl.graph import generate_erdos_renyi

from conftest import random_graph

needs_compiled = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                    reason="compiled kernels not built")


def _graph_inputs(seed, batch=3, d=4):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 2, 12)
    return rng, g, rng.normal(size=(batch, g.n, d))


@needs_compiled
@pytest.mark.parametrize("kind,param", [(kernels.GAUSSIAN, 0.8), (kernels.LAPLACE, 1.7),
                                        (kernels.VMF, 2.5), (kernels.GAUSSIAN, 1e-4)])
def test_weight_kernels_agree(kind, param):
    for seed in range(10):
        _, g, x = _graph_inputs(seed)
        for name in ("edge_potentials", "gibbs_weights"):
            fn = getattr(kernels, name)
            a = fn(x, g.indptr, g.indices, kind, param, backend="python")
            b = fn(x, g.indptr, g.indices, kind, param, backend="cython")
            assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_compiled
def test_aggregate_and_block_kernels_agree():
    for seed in range(10):
        rng, g, x = _graph_inputs(seed)
        w = rng.random(size=(3, g.nnz))
        assert np.allclose(kernels.aggregate(x, g.indptr, g.indices, w, backend="python"),
                           kernels.aggregate(x, g.indptr, g.indices, w, backend="cython"),
                           atol=1e-13)
        blocks = rng.normal(size=(g.nnz, 2, 4))
        y = rng.normal(size=(3, g.n, 2))
        for be in ("python", "cython"):
            mv = kernels.block_matvec(blocks, g.indptr, g.indices, x, backend=be)
            rmv = kernels.block_rmatvec(blocks, g.indptr, g.indices, y, g.n, backend=be)
            ref = sparse.bsr_matrix((blocks, g.indices, g.indptr), shape=(2 * g.n, 4 * g.n))
            assert np.allclose(mv, (ref @ x.reshape(3, -1).T).T.reshape(3, g.n, 2), atol=1e-12)
            assert np.allclose(rmv, (ref.T @ y.reshape(3, -1).T).T.reshape(3, g.n, 4),
                               atol=1e-12)


@needs_compiled
def test_simulator_kernels_agree():
    rng = np.random.default_rng(0)
    pos = np.column_stack([rng.normal(size=6) * 0.05, -0.12 * np.arange(6)])
    vel = rng.normal(size=(6, 2)) * 0.1
    forces = rng.uniform(-20, 20, size=200)
    args = (1.0, 500.0, 0.1, 0.5, 9.81, 0.01)
    a = kernels.rope_rollout(pos, vel, forces, *args, backend="python")
    b = kernels.rope_rollout(pos, vel, forces, *args, backend="cython")
    assert a.shape == (201, 6, 4) and np.allclose(a, b, atol=1e-10)
    g = generate_erdos_renyi(20, 0.3, 1)
    gen = rng.random(20) < 0.3
    v, vd = 1 + 0.1 * rng.normal(size=20), 0.1 * rng.normal(size=20)
    u, w = rng.normal(size=(100, 20)), 0.01 * rng.normal(size=(100, 20))
    gargs = (gen, 1.0, 2.0, 0.5, 1.0, 0.05)
    a = kernels.grid_rollout(v, vd, g.indptr, g.indices, u, w, *gargs, backend="python")
    b = kernels.grid_rollout(v, vd, g.indptr, g.indices, u, w, *gargs, backend="cython")
    assert a.shape == (101, 20, 2) and np.allclose(a, b, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_pure_python_switch():
    env = dict(os.environ, KGRAPHCTL_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c",
                          "from kgraphctl import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_input_shape_validation():
    with pytest.raises(ValueError):
        kernels.aggregate(np.zeros((2, 3)), np.array([0, 1]), np.array([0]), np.ones((1, 1)))
