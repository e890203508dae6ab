"""Randomized property checks (hypothesis)."""
from math import comb

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from kgraphctl.control import ControlProblem, solve_lqr
from kgraphctl.embedding import (EmbeddingModel, FitConfig, fit, load_model, predict_one_step,
                                 rollout, save_model)
from kgraphctl.features import (decode_action, encode_action, make_action_projection,
                                polynomial_map)
from kgraphctl.graph import Graph, generate_erdos_renyi
from kgraphctl.mean_field import GibbsPotential, aggregate_history, edge_weights

from conftest import random_feature_data

FAST = settings(max_examples=40, deadline=None)
seeds = st.integers(0, 2 ** 31 - 1)
potentials = st.sampled_from([("gaussian", 0.5), ("gaussian", 5.0), ("laplace", 1.0),
                              ("vmf", 0.0), ("vmf", 3.0)])


@FAST
@given(n=st.integers(2, 20), p=st.floats(0.05, 1.0), seed=seeds)
def test_erdos_renyi_invariants(n, p, seed):
    g = generate_erdos_renyi(n, p, seed, max_retries=100000)
    a = g.adjacency
    assert np.array_equal(a, a.T) and not np.any(np.diag(a)) and g.is_connected()
    for i in range(n):
        assert i in g.neighborhood(i)
    assert Graph.from_json(g.to_json()).fingerprint() == g.fingerprint()


@FAST
@given(seed=seeds, pot=potentials, d=st.integers(1, 4))
def test_gibbs_weights_form_a_simplex(seed, pot, d):
    rng = np.random.default_rng(seed)
    g = generate_erdos_renyi(int(rng.integers(2, 9)), 0.5, seed, max_retries=100000)
    x = rng.normal(size=(g.n, d)) * 3
    w = edge_weights(g, x, GibbsPotential(*pot))
    assert np.all(w > 0) and np.all(np.isfinite(w))
    sums = np.add.reduceat(w, g.indptr[:-1])
    assert np.allclose(sums, 1.0, atol=1e-12)
    hbar = aggregate_history(g, x, w)
    for i in range(g.n):
        nb = x[g.neighborhood(i)]
        assert np.all(hbar[i] >= nb.min(axis=0) - 1e-12) and np.all(hbar[i] <= nb.max(axis=0) + 1e-12)


@FAST
@given(d=st.integers(1, 6), deg=st.integers(1, 2), seed=seeds)
def test_polynomial_feature_count(d, deg, seed):
    m = polynomial_map(d, deg)
    z = m.transform(np.random.default_rng(seed).normal(size=d))
    assert z.shape == (comb(d + deg, deg),) and z[0] == 1.0


@FAST
@given(d_a=st.integers(1, 4), extra=st.integers(0, 5), seed=seeds)
def test_action_projection_roundtrip(d_a, extra, seed):
    proj = make_action_projection(d_a, d_a + extra, seed=seed)
    a = np.random.default_rng(seed).normal(size=(7, d_a))
    assert np.allclose(decode_action(proj, encode_action(proj, a)), a, atol=1e-12)


@FAST
@given(seed=seeds, form=st.sampled_from(["dense", "hom", "hom_mean", "tensor"]))
def test_fit_satisfies_normal_equations(seed, form):
    rng = np.random.default_rng(seed)
    g = generate_erdos_renyi(int(rng.integers(2, 6)), 0.6, seed, max_retries=100000)
    data = random_feature_data(rng, g, samples=30, d=2, d_a=1)
    m = fit(data, g, FitConfig(form))
    assert m.report["max_normal_residual"] < 1e-8


@FAST
@given(seed=seeds)
def test_rollout_superposition(seed):
    rng = np.random.default_rng(seed)
    g = generate_erdos_renyi(4, 0.6, seed, max_retries=100000)
    m = EmbeddingModel("dense", g.n, g.indptr.copy(), g.indices.copy(), 2, 1, 1e-6,
                       hist_blocks=0.4 * rng.normal(size=(g.nnz, 2, 2)),
                       act_blocks=rng.normal(size=(g.nnz, 2, 1)))
    x0, u, v = rng.normal(size=(g.n, 2)), rng.normal(size=(5, g.n, 1)), rng.normal(size=(5, g.n, 1))
    lhs = rollout(m, g, x0, u + v)
    rhs = rollout(m, g, x0, u) + rollout(m, g, np.zeros_like(x0), v)
    assert np.allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(seed=seeds, form=st.sampled_from(["dense", "hom", "hom_mean"]))
def test_lqr_beats_zero_and_random_actions(seed, form):
    rng = np.random.default_rng(seed)
    g = generate_erdos_renyi(4, 0.6, seed, max_retries=100000)
    data = random_feature_data(rng, g, samples=40, d=2, d_a=1)
    m = fit(data, g, FitConfig(form, ridge=1e-3))
    proj = make_action_projection(1)
    psi0, target = rng.normal(size=(g.n, 2)), rng.normal(size=(g.n, 2))
    prob = ControlProblem.default(6, target, 1, q2=1e-2)
    sol = solve_lqr(prob, m, g, psi0, proj)

    def cost(actions):
        psi_a = encode_action(proj, actions)
        if form == "hom_mean":
            # evaluate the same frozen-weight model the planner optimizes
            cur, total = psi0, 0.0
            for t in range(6):
                cur = predict_one_step(m, g, cur, psi_a[t], weights=sol.weights[t])
                total += np.sum((cur - target) ** 2) + 1e-2 * np.sum(psi_a[t] ** 2)
            return total
        pred = rollout(m, g, psi0, psi_a)
        return np.sum((pred - target) ** 2) + 1e-2 * np.sum(psi_a ** 2)

    best = cost(sol.actions)
    assert abs(best - sol.cost) <= 1e-8 * (1 + best)
    assert best <= cost(np.zeros_like(sol.actions)) + 1e-10
    for _ in range(100):
        assert best <= cost(rng.normal(size=sol.actions.shape)) + 1e-10


@settings(max_examples=10, deadline=None)
@given(seed=seeds, form=st.sampled_from(["dense", "hom", "hom_mean", "tensor"]))
def test_model_serialization_roundtrip(tmp_path_factory, seed, form):
    rng = np.random.default_rng(seed)
    g = generate_erdos_renyi(3, 0.7, seed, max_retries=100000)
    m = fit(random_feature_data(rng, g, samples=20, d=2, d_a=1), g, FitConfig(form))
    path = tmp_path_factory.mktemp("model")
    save_model(m, path)
    back, _ = load_model(path)
    x, a = rng.normal(size=(g.n, 2)), rng.normal(size=(g.n, 1))
    assert np.array_equal(predict_one_step(back, g, x, a), predict_one_step(m, g, x, a))
