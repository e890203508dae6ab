"""Finite-horizon quadratic control in feature space.

The learned model is linear in history and action features once the
mean-field weights are held fixed. Freezing them along a nominal rollout
makes the whole predicted feature trajectory affine in the stacked actions,

    Psi = F + Phi u,

so the quadratic cost reduces to a ridge problem whose normal equations
``(Phi^T Q1 Phi + R) u = Phi^T Q1 (Psi_* - F)`` are solved either directly
(small problems, ``Phi`` materialized) or by conjugate gradients using only
forward/adjoint rollouts of ``Phi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import LinearOperator, cg

from .embedding import (EmbeddingModel, action_operator, history_operator, predict_one_step)
from .features import ActionProjection, Decoder, FeatureMap, encode_action, encode_graph
from .graph import Graph
from .mean_field import edge_weights

DENSE_LIMIT = 2000          # max unknowns for the direct solve
DENSE_ELEMENTS = 4_000_000  # max entries of a materialized Phi
GRADIENT_TOL = 1e-6


class ControlError(FloatingPointError):
    """The control solve failed numerically."""


def _check_psd(name, m, strict):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.allclose(m, m.T, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ValueError(f"{name} must be symmetric")
    low = np.linalg.eigvalsh(m).min()
    if strict and not low > 0:
        raise ValueError(f"{name} must be positive definite")
    if not strict and low < -1e-12 * max(1.0, np.abs(m).max()):
        raise ValueError(f"{name} must be positive semi-definite")
    return m


@dataclass
class ControlProblem:
    """Per-node cost ``sum_t |psi_t - psi_*|^2_Q1 + |psi^a_t|^2_Q2``.

    ``target`` is ``(N, d)`` in feature space; ``Q1`` (``d x d``) and ``Q2``
    (``d_a x d_a`` on action features) are shared by all nodes. ``actuated``
    restricts the decision variables to a subset of nodes.
    """

    horizon: int
    target: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    feedback_step: int | None = None
    actuated: np.ndarray | None = None
    refine: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.feedback_step is not None and not 0 < self.feedback_step <= self.horizon:
            raise ValueError("feedback step must lie in (0, horizon]")
        if not 0 <= self.refine <= 3:
            raise ValueError("refine passes must be between 0 and 3")
        self.target = np.asarray(self.target, dtype=float)
        if self.target.ndim != 2:
            raise ValueError("target must be an (N, d) feature array")
        self.Q1 = _check_psd("Q1", self.Q1, strict=False)
        self.Q2 = _check_psd("Q2", self.Q2, strict=True)
        if self.Q1.shape[0] != self.target.shape[1]:
            raise ValueError("Q1 does not match the target feature dimension")
        if self.actuated is not None:
            self.actuated = np.asarray(self.actuated, dtype=bool)
            if self.actuated.shape != (self.target.shape[0],):
                raise ValueError("actuated mask must have one entry per node")

    @classmethod
    def default(cls, horizon, target, action_feature_dim, q1=1.0, q2=1e-3, **kw):
        d = np.asarray(target).shape[-1]
        return cls(horizon, target, q1 * np.eye(d), q2 * np.eye(action_feature_dim), **kw)

    def with_horizon(self, horizon: int) -> "ControlProblem":
        return ControlProblem(horizon, self.target, self.Q1, self.Q2, None, self.actuated,
                              self.refine)


class SparseOperator:
    """History map given as an explicit sparse matrix."""

    def __init__(self, matrix):
        self.matrix = matrix
        self.matrix_t = matrix.T.tocsr()

    def dot(self, x):
        return self.matrix @ x

    def tdot(self, y):
        return self.matrix_t @ y


class KronOperator:
    """``W ⊗ C`` applied without forming it: ``X -> W X C^T`` on ``(N, d)`` blocks."""

    def __init__(self, mixing, op):
        self.mixing = mixing
        self.mixing_t = mixing.T.tocsr()
        self.op = np.asarray(op)

    def _apply(self, w, c, x):
        n, d = w.shape[0], c.shape[0]
        cols = x.shape[1:] if x.ndim > 1 else ()
        blocks = x.reshape((n, d, -1))
        mixed = (w @ blocks.reshape(n, -1)).reshape(blocks.shape)
        return np.einsum("ij,njk->nik", c, mixed).reshape((n * d,) + cols)

    def dot(self, x):
        return self._apply(self.mixing, self.op, x)

    def tdot(self, y):
        return self._apply(self.mixing_t, self.op.T, y)


@dataclass
class LinearizedRollout:
    """Affine map ``u -> F + Phi u`` from stacked raw actions to predicted features.

    ``u`` has shape ``(M, n_act * d_a)`` (actuated nodes in ascending order);
    the predicted features have shape ``(M, N * d)`` for steps ``1..M``.
    """

    free: np.ndarray
    hist_ops: list
    act_op: sparse.csr_matrix
    weights: np.ndarray | None
    actuated: np.ndarray
    action_dim: int

    @property
    def horizon(self) -> int:
        return self.free.shape[0]

    @property
    def step_inputs(self) -> int:
        return self.act_op.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.horizon * self.step_inputs

    def apply(self, u: np.ndarray) -> np.ndarray:
        """``Phi u`` for ``u`` of shape ``(M, n_u)`` or a batch ``(M, n_u, k)``."""
        u = np.asarray(u, dtype=float)
        squeeze = u.ndim == 2
        if squeeze:
            u = u[..., None]
        x = np.zeros((self.act_op.shape[0], u.shape[2]))
        out = np.empty((self.horizon,) + x.shape)
        for s in range(self.horizon):
            x = (self.hist_ops[s].dot(x) if s else x) + self.act_op @ u[s]
            out[s] = x
        return out[..., 0] if squeeze else out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """``Phi^T y`` for ``y`` of shape ``(M, N * d)``."""
        y = np.asarray(y, dtype=float)
        mu = np.zeros(y.shape[1:])
        out = np.empty((self.horizon, self.step_inputs) + y.shape[2:])
        for s in range(self.horizon - 1, -1, -1):
            mu = y[s] + (self.hist_ops[s + 1].tdot(mu) if s + 1 < self.horizon else 0.0)
            out[s] = self.act_op.T @ mu
        return out

    def matrix(self) -> np.ndarray:
        """Materialized ``Phi`` of shape ``(M N d, M n_u)``."""
        m, nu = self.horizon, self.step_inputs
        eye = np.eye(m * nu).reshape(m, nu, m * nu)
        return self.apply(eye).reshape(-1, m * nu)

    def predict(self, u: np.ndarray) -> np.ndarray:
        return self.free + self.apply(u)

    def expand_actions(self, u: np.ndarray) -> np.ndarray:
        """Per-node raw actions ``(M, N, d_a)`` with zeros on unactuated nodes."""
        full = np.zeros((self.horizon, self.actuated.size, self.action_dim))
        full[:, self.actuated] = np.asarray(u).reshape(self.horizon, -1, self.action_dim)
        return full


def _actuated(model: EmbeddingModel, actuated):
    return np.ones(model.n, dtype=bool) if actuated is None else np.asarray(actuated, dtype=bool)


def _action_map(model: EmbeddingModel, g: Graph, proj: ActionProjection, actuated):
    op = action_operator(model, g).tocsr()
    expand = sparse.kron(sparse.eye(g.n), sparse.csr_matrix(proj.P), format="csr")
    cols = np.flatnonzero(np.repeat(actuated, proj.action_dim))
    return (op @ expand).tocsr()[:, cols]


def nominal_weights(model: EmbeddingModel, g: Graph, psi0, psi_a_seq, backend=None):
    """Gibbs weights along the rollout driven by ``psi_a_seq`` (``hom_mean`` only)."""
    psi_a_seq = np.asarray(psi_a_seq, dtype=float)
    cur = np.asarray(psi0, dtype=float)
    out = np.empty((psi_a_seq.shape[0], g.nnz))
    for t in range(psi_a_seq.shape[0]):
        out[t] = edge_weights(g, cur, model.potential, backend=backend)
        cur = predict_one_step(model, g, cur, psi_a_seq[t], weights=out[t], backend=backend)
    return out


def linearize_rollout(model: EmbeddingModel, g: Graph, psi0, horizon: int, proj: ActionProjection,
                      actuated=None, weights=None, backend=None) -> LinearizedRollout:
    """Free response and stacked action map for ``horizon`` steps from ``psi0``.

    For ``hom_mean`` the weights are frozen along the zero-action rollout
    unless ``weights`` (``(M, nnz)``) is supplied.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if model.form == "tensor":
        raise ValueError("the tensor form is bilinear in history and action features; "
                         "use dense, hom or hom_mean for control")
    if proj.feature_dim != model.action_dim:
        raise ValueError("action projection does not match the model's action features")
    psi0 = np.asarray(psi0, dtype=float)
    if psi0.shape != (g.n, model.dim):
        raise ValueError(f"initial features must have shape ({g.n}, {model.dim})")
    actuated = _actuated(model, actuated)
    zero = np.zeros((horizon, g.n, model.action_dim))
    if model.form == "hom_mean":
        if weights is None:
            weights = nominal_weights(model, g, psi0, zero, backend=backend)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (horizon, g.nnz):
            raise ValueError("frozen weights must have shape (horizon, nnz)")
        hist_ops = [KronOperator(sparse.csr_matrix((weights[t], g.indices, g.indptr),
                                                   shape=(g.n, g.n)), model.hist_blocks)
                    for t in range(horizon)]
    else:
        weights = None
        hist_ops = [SparseOperator(history_operator(model, g).tocsr())] * horizon
    free = np.empty((horizon, g.n * model.dim))
    x = psi0.ravel()
    for t in range(horizon):
        x = hist_ops[t].dot(x)
        free[t] = x
    return LinearizedRollout(free, hist_ops, _action_map(model, g, proj, actuated), weights,
                             actuated, proj.action_dim)


@dataclass
class LQRSolution:
    actions: np.ndarray          # (M, N, d_a) raw actions, zero on unactuated nodes
    action_features: np.ndarray  # (M, N, d_a_feat)
    predicted: np.ndarray        # (M, N, d) predicted features for steps 1..M
    cost: float
    gradient_norm: float
    initial_gradient_norm: float
    method: str
    iterations: int = 0
    weights: np.ndarray | None = None


class _Quadratic:
    """Cost pieces of one linearized problem."""

    def __init__(self, lin: LinearizedRollout, problem: ControlProblem, proj: ActionProjection,
                 n: int):
        self.lin = lin
        d = problem.Q1.shape[0]
        self.q1 = sparse.kron(sparse.eye(n), sparse.csr_matrix(problem.Q1), format="csr")
        r = proj.P.T @ problem.Q2 @ proj.P
        self.r = sparse.kron(sparse.eye(int(lin.actuated.sum())), sparse.csr_matrix(r),
                             format="csr")
        self.target = np.broadcast_to(problem.target.reshape(1, -1), (lin.horizon, n * d))
        self.offset = lin.free - self.target

    def state_cost(self, u):
        e = self.offset + self.lin.apply(u)
        return float(np.sum(e * (self.q1 @ e.T).T))

    def cost(self, u):
        return self.state_cost(u) + float(np.sum(u * (self.r @ u.T).T))

    def hess_vec(self, u):
        """``(Phi^T Q1 Phi + R) u``."""
        return self.lin.adjoint((self.q1 @ self.lin.apply(u).T).T) + (self.r @ u.T).T

    def rhs(self):
        return -self.lin.adjoint((self.q1 @ self.offset.T).T)

    def gradient(self, u):
        return 2.0 * (self.hess_vec(u) - self.rhs())


def solve_lqr(problem: ControlProblem, model: EmbeddingModel, g: Graph, psi0,
              proj: ActionProjection, method: str = "auto", weights=None,
              backend=None) -> LQRSolution:
    """Minimize the quadratic feature-space cost over the stacked actions.

    ``method`` is ``"direct"`` (Cholesky on the materialized normal
    equations), ``"cg"`` (matrix-free conjugate gradients) or ``"auto"``.
    With ``problem.refine > 0`` the frozen weights are re-derived along the
    planned trajectory and the problem is re-solved that many times.
    """
    model.check_graph(g)
    if problem.target.shape != (g.n, model.dim):
        raise ValueError(f"target must have shape ({g.n}, {model.dim})")
    if problem.Q2.shape[0] != model.action_dim:
        raise ValueError("Q2 does not match the model's action feature dimension")
    sol = None
    for _ in range(problem.refine + 1):
        if sol is not None and model.form == "hom_mean":
            weights = nominal_weights(model, g, psi0, sol.action_features, backend=backend)
        lin = linearize_rollout(model, g, psi0, problem.horizon, proj, problem.actuated,
                                weights=weights, backend=backend)
        sol = _solve_linearized(lin, problem, proj, g.n, method)
        if model.form != "hom_mean":
            break
    return sol


def _solve_linearized(lin: LinearizedRollout, problem: ControlProblem, proj, n, method):
    quad = _Quadratic(lin, problem, proj, n)
    m, nu = lin.horizon, lin.step_inputs
    b = quad.rhs()
    g0 = float(np.linalg.norm(2.0 * b))
    if method == "auto":
        small = m * nu <= DENSE_LIMIT and lin.free.size * m * nu <= DENSE_ELEMENTS
        method = "direct" if small else "cg"
    iterations = 0
    if not np.any(b):
        u = np.zeros((m, nu))
    elif method == "direct":
        phi = lin.matrix()
        q1 = quad.q1
        qphi = np.vstack([q1 @ blk for blk in phi.reshape(m, -1, m * nu)])
        hess = phi.T @ qphi + sparse.kron(sparse.eye(m), quad.r).toarray()
        try:
            u = linalg.cho_solve(linalg.cho_factor(hess), b.ravel()).reshape(m, nu)
        except linalg.LinAlgError as exc:
            raise ControlError("control normal equations are not positive definite") from exc
    elif method == "cg":
        size = m * nu
        op = LinearOperator((size, size), dtype=float,
                            matvec=lambda v: quad.hess_vec(v.reshape(m, nu)).ravel())
        counter = {"k": 0}

        def count(_):
            counter["k"] += 1
        u, info = cg(op, b.ravel(), rtol=0.1 * GRADIENT_TOL, atol=0.0, maxiter=20 * size,
                     callback=count)
        iterations = counter["k"]
        if info < 0:
            raise ControlError("conjugate gradients broke down")
        u = u.reshape(m, nu)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(u)):
        raise ControlError("non-finite control solution")
    grad = float(np.linalg.norm(quad.gradient(u)))
    if grad > GRADIENT_TOL * (1.0 + g0):
        raise ControlError(f"optimality residual {grad:.3e} exceeds tolerance "
                           f"({GRADIENT_TOL:g} x (1 + {g0:.3e}))")
    actions = lin.expand_actions(u)
    return LQRSolution(actions, encode_action(proj, actions), lin.predict(u).reshape(m, n, -1),
                       quad.cost(u), grad, g0, method, iterations, lin.weights)


# ---------------------------------------------------------------- closed loop

@dataclass
class ControlResult:
    observations: np.ndarray  # (M + 1, N, d_o) executed trajectory
    actions: np.ndarray       # (M, N, d_a) applied raw actions
    cost: float
    error: float
    plans: list = field(default_factory=list)

    def __post_init__(self):
        if self.observations.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("observation and action lengths are inconsistent")


def realized_cost(problem: ControlProblem, fmap: FeatureMap, g: Graph, proj: ActionProjection,
                  observations, actions) -> float:
    """Cost of an executed trajectory with its observations re-encoded."""
    psi = encode_graph(fmap, g, np.asarray(observations)[1:])
    e = psi - problem.target
    psi_a = encode_action(proj, actions)
    return float(np.einsum("tni,ij,tnj->", e, problem.Q1, e)
                 + np.einsum("tni,ij,tnj->", psi_a, problem.Q2, psi_a))


def control_error(final_obs, target_obs) -> float:
    """``|o_M - o_*| / |o_*|`` over the stacked final observation."""
    target_obs = np.asarray(target_obs, dtype=float)
    denom = np.linalg.norm(target_obs)
    if denom == 0:
        raise ValueError("control error is undefined for a zero target")
    return float(np.linalg.norm(np.asarray(final_obs, dtype=float) - target_obs) / denom)


def control_metrics(result: ControlResult, target_obs) -> dict:
    return {"cost": result.cost, "error": control_error(result.observations[-1], target_obs)}


def receding_horizon_control(env, model: EmbeddingModel, fmap: FeatureMap, proj: ActionProjection,
                             decoder: Decoder | None, problem: ControlProblem, target_obs,
                             method: str = "auto", backend=None) -> ControlResult:
    """Plan over the full horizon, execute up to the feedback step, re-encode the
    observed state, re-plan the remainder and execute it.

    ``env`` must already be reset. Without a feedback step the whole plan is
    executed open loop. ``decoder`` is accepted for interface symmetry; the
    planner works purely in feature space and does not need it.
    """
    g = env.graph
    if env.action_dim != proj.action_dim:
        raise ValueError("environment and action projection disagree on the action dimension")
    obs = [np.array(env.obs)]
    actions = []
    plans = []
    remaining = problem.horizon
    segment = problem.feedback_step or problem.horizon
    current = problem
    while remaining > 0:
        psi0 = encode_graph(fmap, g, obs[-1])
        plan = solve_lqr(current, model, g, psi0, proj, method=method, backend=backend)
        plans.append(plan)
        run = min(segment, remaining)
        executed = env.rollout(plan.actions[:run])
        actions.append(plan.actions[:run])
        obs.extend(executed)
        remaining -= run
        current = problem.with_horizon(remaining) if remaining else current
        segment = remaining
    observations = np.stack(obs)
    acts = np.concatenate(actions)
    cost = realized_cost(problem, fmap, g, proj, observations, acts)
    return ControlResult(observations, acts, cost, control_error(observations[-1], target_obs),
                         plans)


def free_response(env, horizon: int) -> np.ndarray:
    """Roll ``env`` forward with zero actions; returns ``(M + 1, N, d_o)``."""
    start = np.array(env.obs)
    out = env.rollout(np.zeros((horizon, env.graph.n, env.action_dim)))
    return np.concatenate([start[None], out])
