import numpy as np
import pytest

from kgraphctl.features import (ActionProjection, FeatureMap, SingularSystemError, decode,
                                decode_action, decoder_residual, encode_action, encode_graph,
                                encode_node, fit_decoder, identity_map, make_action_projection,
                                median_bandwidth, polynomial_map, sample_rff_map)
from kgraphctl.graph import chain_graph, complete_graph, ring_graph, single_node_graph


def test_rff_self_kernel_is_one():
    m = sample_rff_map(3, 2048, 1.0, seed=0)
    x = np.random.default_rng(1).normal(size=(20, 3))
    z = m.transform(x)
    assert np.all(np.abs(np.sum(z * z, axis=1) - 1.0) < 0.05)


def test_rff_kernel_value_at_sqrt2_gamma():
    gamma = 0.7
    m = sample_rff_map(2, 4096, gamma, seed=3)
    x = np.array([0.3, -0.2])
    y = x + gamma * np.sqrt(2) * np.array([1.0, 0.0])
    assert abs(m.transform(x) @ m.transform(y) - np.exp(-1)) < 0.05


def test_rff_coordinates_bounded_and_deterministic():
    a = sample_rff_map(4, 64, 2.0, seed=11)
    b = sample_rff_map(4, 64, 2.0, seed=11)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
    z = a.transform(np.random.default_rng(0).normal(size=(100, 4)) * 10)
    assert np.all(np.abs(z) <= np.sqrt(2 / 64) + 1e-15)


def test_rff_frequency_law():
    m = sample_rff_map(5, 4000, 0.5, seed=2)
    assert abs(m.W.std() - 2.0) < 0.05
    assert m.b.min() >= 0 and m.b.max() < 2 * np.pi


@pytest.mark.parametrize("d", [512, 2048])
def test_rff_uniform_approximation(d):
    rng = np.random.default_rng(d)
    successes = 0
    for seed in range(20):
        m = sample_rff_map(3, d, 1.0, seed=seed)
        x, y = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        approx = np.sum(m.transform(x) * m.transform(y), axis=1)
        exact = np.exp(-np.sum((x - y) ** 2, axis=1) / 2)
        successes += np.max(np.abs(approx - exact)) <= 4 / np.sqrt(d)
    assert successes >= 19


def test_rff_json_rederives_frequencies():
    m = sample_rff_map(2, 16, 1.3, seed=5, augment=True)
    blob = m.to_json()
    assert "W" not in blob
    back = FeatureMap.from_json(blob)
    assert np.array_equal(back.W, m.W) and back.raw_dim == 4


def test_polynomial_examples():
    assert polynomial_map(1, 1).transform(np.array([2.0])).tolist() == [1, 2]
    assert polynomial_map(1, 2).transform(np.array([2.0])).tolist() == [1, 2, 4]
    assert polynomial_map(2, 2).transform(np.array([1.0, 1.0])).tolist() == [1] * 6
    assert polynomial_map(2, 2).transform(np.array([2.0, 3.0])).tolist() == [1, 2, 3, 4, 6, 9]
    with pytest.raises(ValueError):
        polynomial_map(2, 3)


def test_encode_node_without_augmentation_ignores_graph():
    m = sample_rff_map(2, 8, 1.0, seed=0)
    obs = np.random.default_rng(0).normal(size=(3, 2))
    a = encode_node(m, chain_graph(3), obs, 1)
    b = encode_node(m, complete_graph(3), obs, 1)
    assert np.array_equal(a, b)


def test_encode_node_single_node_zero_slot():
    m = identity_map(2, augment=True)
    out = encode_node(m, single_node_graph(), np.array([[1.5, -2.0]]), 0)
    assert out.tolist() == [1.5, -2.0, 0.0, 0.0]


def test_encode_node_equal_observations():
    m = identity_map(2, augment=True)
    v = np.array([0.4, 0.9])
    out = encode_node(m, chain_graph(3), np.tile(v, (3, 1)), 1)
    assert np.allclose(out, np.concatenate([v, v]))


def test_encode_graph_matches_encode_node():
    m = sample_rff_map(2, 12, 0.8, seed=4, augment=True)
    g = chain_graph(5)
    obs = np.random.default_rng(3).normal(size=(5, 2))
    full = encode_graph(m, g, obs)
    for i in range(5):
        assert np.allclose(full[i], encode_node(m, g, obs, i), atol=1e-14)


def test_encode_node_dimension_mismatch():
    with pytest.raises(ValueError):
        encode_node(identity_map(2), chain_graph(3), np.zeros((3, 3)), 0)


def test_encoding_is_permutation_equivariant_on_ring():
    g = ring_graph(6)
    m = sample_rff_map(2, 10, 1.0, seed=9, augment=True)
    obs = np.random.default_rng(5).normal(size=(6, 2))
    perm = np.roll(np.arange(6), 1)  # rotation is an automorphism of the ring
    assert np.allclose(encode_graph(m, g, obs[perm]), encode_graph(m, g, obs)[perm], atol=1e-14)


def test_action_projection_identity_and_roundtrip():
    p = make_action_projection(2)
    assert encode_action(p, np.array([1.0, 2.0])).tolist() == [1.0, 2.0]
    q = make_action_projection(3, 7, seed=1)
    assert np.allclose(q.P.T @ q.P, np.eye(3), atol=1e-14)
    a = np.random.default_rng(0).normal(size=(1000, 3))
    psi = encode_action(q, a)
    assert np.max(np.abs(decode_action(q, psi) - a)) < 1e-12
    assert np.allclose(np.linalg.norm(psi, axis=1), np.linalg.norm(a, axis=1), atol=1e-12)
    assert not np.any(encode_action(q, np.zeros(3)))


def test_action_projection_validation():
    with pytest.raises(ValueError):
        ActionProjection(np.ones((3, 2)))
    with pytest.raises(ValueError):
        encode_action(make_action_projection(2), np.zeros(3))
    with pytest.raises(ValueError):
        make_action_projection(3, 2)


def test_decoder_self_regression_is_identity():
    x = np.random.default_rng(0).normal(size=(200, 3))
    dec = fit_decoder(x, x, rho=1e-12)
    assert np.allclose(dec.D, np.eye(3), atol=1e-6)


def test_decoder_zero_targets():
    x = np.random.default_rng(0).normal(size=(50, 4))
    assert not np.any(fit_decoder(x, np.zeros((50, 2)), rho=1e-3).D)


def test_decoder_scalar_example():
    o = np.random.default_rng(1).normal(size=(100, 1))
    dec = fit_decoder(2 * o, o, rho=1e-12)
    assert abs(dec.D[0, 0] - 0.5) < 1e-9
    assert abs(decode(dec, np.array([4.0]))[0] - 2.0) < 1e-8
    assert not np.any(decode(dec, np.zeros(1)))


def test_decoder_normal_equations():
    rng = np.random.default_rng(2)
    psi, obs = rng.normal(size=(300, 8)), rng.normal(size=(300, 3))
    dec = fit_decoder(psi, obs, rho=0.1)
    assert decoder_residual(dec, psi, obs) < 1e-8


def test_decoder_singular_without_ridge():
    psi = np.ones((10, 2))
    with pytest.raises(SingularSystemError):
        fit_decoder(psi, np.arange(10.0)[:, None], rho=0.0)
    with pytest.raises(ValueError):
        decode(fit_decoder(psi, np.arange(10.0)[:, None], rho=1e-3), np.zeros(3))


def test_median_bandwidth():
    x = np.array([[0.0], [1.0], [3.0]])
    assert median_bandwidth(x) == 2.0
    assert median_bandwidth(np.zeros((5, 2))) == 1.0
