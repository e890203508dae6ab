import numpy as np
import pytest

from kgraphctl.graph import chain_graph, complete_graph, single_node_graph
from kgraphctl.mean_field import (GibbsPotential, aggregate_history, edge_weights, gibbs_weights,
                                  mean_field_features, potential, weight_matrix)

from conftest import random_graph


def test_potential_examples():
    g1 = GibbsPotential("gaussian", 1.0)
    assert potential(g1, [1.0, 2.0], [1.0, 2.0]) == 0.0
    assert potential(g1, [0.0, 0.0], [1.0, 1.0]) == pytest.approx(-1.0, abs=1e-15)
    assert potential(GibbsPotential("vmf", 3.0), [1.0, 2.0], [1.0, 2.0]) == pytest.approx(3.0)
    assert potential(GibbsPotential("laplace", 2.0), [0.0, 0.0], [1.0, -3.0]) == -2.0


def test_vmf_rejects_zero_vector():
    with pytest.raises(ValueError):
        potential(GibbsPotential("vmf", 1.0), [0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        edge_weights(chain_graph(2), np.array([[0.0, 0.0], [1.0, 0.0]]), GibbsPotential("vmf", 1.0))


def test_potential_hyperparameters_validated():
    with pytest.raises(ValueError):
        GibbsPotential("gaussian", 0.0)
    with pytest.raises(ValueError):
        GibbsPotential("laplace", -1.0)
    with pytest.raises(ValueError):
        GibbsPotential("vmf", -0.1)
    with pytest.raises(ValueError):
        GibbsPotential("mlp", 1.0)
    GibbsPotential("vmf", 0.0)


def test_identical_features_give_uniform_weights():
    g = complete_graph(4)
    w = gibbs_weights(g, np.ones((4, 3)), GibbsPotential("gaussian", 0.1), 2)
    assert np.allclose(w.weights, 0.25, atol=1e-15)


def test_two_node_closed_form():
    g = chain_graph(2)
    feats = np.array([[0.0, 0.0], [1.0, 1.0]])
    w = gibbs_weights(g, feats, GibbsPotential("gaussian", 1.0), 0)
    assert w.neighbors.tolist() == [0, 1]
    assert np.allclose(w.weights, [0.73106, 0.26894], atol=1e-5)
    assert np.allclose(w.weights, np.array([1, np.exp(-1)]) / (1 + np.exp(-1)), atol=1e-15)


def test_temperature_limits(backend):
    rng = np.random.default_rng(0)
    g = complete_graph(5)
    feats = np.arange(5)[:, None] * 0.5 + rng.normal(size=(5, 3)) * 0.01
    wide = edge_weights(g, feats, GibbsPotential("gaussian", 1e6), backend=backend)
    assert np.allclose(wide, 0.2, atol=1e-9)
    sharp = weight_matrix(g, edge_weights(g, feats, GibbsPotential("gaussian", 1e-3),
                                          backend=backend))
    assert np.all(np.diag(sharp) >= 1 - 1e-6)


def test_csr_weights_match_per_node_weights(backend):
    rng = np.random.default_rng(1)
    for kind, scale in [("gaussian", 0.7), ("laplace", 1.3), ("vmf", 2.0)]:
        g = random_graph(rng, 3, 8)
        feats = rng.normal(size=(g.n, 4))
        csr = edge_weights(g, feats, GibbsPotential(kind, scale), backend=backend)
        for i in range(g.n):
            ref = gibbs_weights(g, feats, GibbsPotential(kind, scale), i).weights
            assert np.allclose(csr[g.indptr[i]:g.indptr[i + 1]], ref, atol=1e-14)


def test_log_sum_exp_matches_naive_softmax():
    rng = np.random.default_rng(2)
    g = complete_graph(6)
    feats = rng.normal(size=(6, 3))
    p = GibbsPotential("gaussian", 10.0)
    w = edge_weights(g, feats, p)
    for i in range(6):
        e = np.exp([potential(p, feats[i], feats[j]) for j in g.neighborhood(i)])
        assert np.allclose(w[g.indptr[i]:g.indptr[i + 1]], e / e.sum(), atol=1e-12, rtol=0)


def test_no_overflow_at_tiny_scale():
    feats = np.array([[0.0], [100.0], [200.0]])
    w = edge_weights(chain_graph(3), feats, GibbsPotential("gaussian", 1e-4))
    assert np.all(np.isfinite(w))
    assert np.allclose(weight_matrix(chain_graph(3), w).diagonal(), 1.0)


def test_shift_and_scale_invariance():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 4, 8)
    feats = rng.normal(size=(g.n, 3))
    shift = rng.normal(size=3)
    for kind in ("gaussian", "laplace"):
        p = GibbsPotential(kind, 0.8)
        assert np.allclose(edge_weights(g, feats, p), edge_weights(g, feats + shift, p),
                           atol=1e-10)
    p = GibbsPotential("vmf", 1.5)
    assert np.allclose(edge_weights(g, feats, p), edge_weights(g, 3.7 * feats, p), atol=1e-12)


def test_batched_weights():
    rng = np.random.default_rng(4)
    g = chain_graph(4)
    feats = rng.normal(size=(2, 3, 4, 2))
    p = GibbsPotential("gaussian", 1.0)
    w = edge_weights(g, feats, p)
    assert w.shape == (2, 3, g.nnz)
    assert np.allclose(w[1, 2], edge_weights(g, feats[1, 2], p))


def test_aggregate_examples(backend):
    single = aggregate_history(single_node_graph(), np.array([[3.0, 4.0]]), np.array([1.0]),
                               backend=backend)
    assert single.tolist() == [[3.0, 4.0]]
    g = chain_graph(2)
    same = aggregate_history(g, np.array([[1.0, 2.0], [1.0, 2.0]]),
                             np.array([0.1, 0.9, 0.6, 0.4]), backend=backend)
    assert np.allclose(same, [[1.0, 2.0], [1.0, 2.0]])
    mixed = aggregate_history(g, np.array([[1.0, 0.0], [0.0, 1.0]]),
                              np.array([0.7, 0.3, 0.5, 0.5]), backend=backend)
    assert np.allclose(mixed[0], [0.7, 0.3], atol=1e-15)


def test_aggregate_accepts_weight_vectors():
    rng = np.random.default_rng(5)
    g = chain_graph(4)
    feats = rng.normal(size=(4, 2))
    p = GibbsPotential("laplace", 1.0)
    vecs = [gibbs_weights(g, feats, p, i) for i in range(4)]
    hbar, w = mean_field_features(g, feats, p)
    assert np.allclose(aggregate_history(g, feats, vecs), hbar, atol=1e-14)
    assert np.allclose(hbar, weight_matrix(g, w) @ feats, atol=1e-14)
    bad = [gibbs_weights(g, feats, p, 0)] * 4
    with pytest.raises(ValueError):
        aggregate_history(g, feats, bad)
