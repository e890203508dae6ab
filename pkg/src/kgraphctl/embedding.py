"""Closed-form estimation of feature-space transition operators on a graph.

Four model forms share one container, :class:`EmbeddingModel`:

``tensor``
    per (receiver, source) operator on ``psi_h ⊗ psi_a``.
``dense``
    per-pair history blocks and per-pair action blocks.
``hom``
    one history operator per *source* shared by all its receivers,
    per-pair action blocks.
``hom_mean``
    a single history operator applied to the Gibbs-weighted neighborhood
    mean of history features, per-pair action blocks.

Per-pair arrays are indexed by the graph's CSR order (receiver-major,
ascending source). Two estimators are available. ``joint`` minimizes the
ridge-regularized one-step feature loss over all blocks feeding a receiver at
once. ``marginal`` regresses each block on its own source alone,
``C = C_yx (C_xx + lam I)^-1``; it is cheap but biased whenever neighboring
histories are correlated.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import kernels
from .features import (ActionProjection, Decoder, FeatureMap, decode, encode_action,
                       encode_graph, spd_solve_right)
from .graph import Dataset, Graph, Trajectory
from .mean_field import GibbsPotential, aggregate_history, edge_weights

FORMS = ("tensor", "dense", "hom", "hom_mean")
ESTIMATORS = ("joint", "marginal")
TENSOR_GUARD = 4096
_RIDGE_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class FeatureData:
    """Encoded samples stacked in (trajectory, step) order.

    ``hist[s]`` and ``obs[s]`` are ``(N, d)`` history and next-observation
    features, ``act[s]`` the ``(N, d_a)`` action features applied in between.
    """

    hist: np.ndarray
    act: np.ndarray
    obs: np.ndarray

    def __post_init__(self):
        self.hist = np.asarray(self.hist, dtype=float)
        self.act = np.asarray(self.act, dtype=float)
        self.obs = np.asarray(self.obs, dtype=float)
        if not (self.hist.shape[:2] == self.act.shape[:2] == self.obs.shape[:2]):
            raise ValueError("hist/act/obs must share (samples, nodes)")
        if self.hist.shape[2] != self.obs.shape[2]:
            raise ValueError("history and observation features must share a dimension")
        if self.hist.shape[0] == 0:
            raise ValueError("empty dataset")

    @property
    def samples(self) -> int:
        return self.hist.shape[0]

    @property
    def n(self) -> int:
        return self.hist.shape[1]

    @property
    def dim(self) -> int:
        return self.hist.shape[2]

    @property
    def action_dim(self) -> int:
        return self.act.shape[2]

    def check_finite(self):
        for name in ("hist", "act", "obs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"non-finite values in {name} features")


def encode_trajectory(tr: Trajectory, g: Graph, fmap: FeatureMap, proj: ActionProjection):
    """(observation features for steps 0..M, action features for steps 0..M-1)."""
    return encode_graph(fmap, g, tr.observations), encode_action(proj, tr.actions)


def encode_dataset(ds: Dataset, fmap: FeatureMap, proj: ActionProjection) -> FeatureData:
    hist, act, obs = [], [], []
    for tr in ds.trajectories:
        psi, psi_a = encode_trajectory(tr, ds.graph, fmap, proj)
        hist.append(psi[:-1])
        obs.append(psi[1:])
        act.append(psi_a)
    return FeatureData(np.concatenate(hist), np.concatenate(act), np.concatenate(obs))


@dataclass
class FitConfig:
    """``ridge`` is absolute when given; otherwise ``ridge_scale`` times the mean
    diagonal of the regressor covariance."""

    form: str = "hom_mean"
    ridge: float | None = None
    ridge_scale: float = 1e-6
    potential: GibbsPotential = field(default_factory=GibbsPotential)
    estimator: str = "joint"
    action_bias: bool = True

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.ridge is not None and not self.ridge > 0:
            raise ValueError("ridge must be strictly positive")
        if not self.ridge_scale > 0:
            raise ValueError("ridge_scale must be strictly positive")


@dataclass
class EmbeddingModel:
    form: str
    n: int
    indptr: np.ndarray
    indices: np.ndarray
    dim: int
    action_dim: int
    ridge: float
    estimator: str = "joint"
    hist_blocks: np.ndarray | None = None
    act_blocks: np.ndarray | None = None
    tensor_blocks: np.ndarray | None = None
    potential: GibbsPotential | None = None
    action_bias: bool = False
    report: dict = field(default_factory=dict)

    def check_graph(self, g: Graph):
        if g.n != self.n or not np.array_equal(g.indices, self.indices) \
                or not np.array_equal(g.indptr, self.indptr):
            raise ValueError("graph does not match the one the model was fitted on")

    @property
    def pair_history_blocks(self) -> np.ndarray:
        """History blocks expanded to one per CSR pair (dense and hom only)."""
        if self.form == "dense":
            return self.hist_blocks
        if self.form == "hom":
            return self.hist_blocks[self.indices]
        raise ValueError(f"{self.form} has no fixed per-pair history blocks")

    @property
    def tensor_action_dim(self) -> int:
        return self.action_dim + (1 if self.action_bias else 0)


# ---------------------------------------------------------------- moments

@dataclass
class Moments:
    """Sample-average second moments used by the marginal estimators."""

    cov_hh: np.ndarray   # (N, d, d)
    cov_aa: np.ndarray   # (N, d_a, d_a)
    cross_oh: np.ndarray  # (nnz, d, d), receiver obs x source history
    cross_oa: np.ndarray  # (nnz, d, d_a)
    samples: int


def accumulate_moments(data: FeatureData, g: Graph) -> Moments:
    """Empirical (cross-)covariances ``(1/T) sum_t x_t y_t^T`` per node / pair."""
    s = data.samples
    cov_hh = np.einsum("sni,snj->nij", data.hist, data.hist) / s
    cov_aa = np.einsum("sni,snj->nij", data.act, data.act) / s
    recv = g.receivers
    cross_oh = np.empty((g.nnz, data.dim, data.dim))
    cross_oa = np.empty((g.nnz, data.dim, data.action_dim))
    for e, (i, j) in enumerate(zip(recv, g.indices)):
        cross_oh[e] = data.obs[:, i].T @ data.hist[:, j] / s
        cross_oa[e] = data.obs[:, i].T @ data.act[:, j] / s
    return Moments(cov_hh, cov_aa, cross_oh, cross_oa, s)


def _ridge(cfg: FitConfig, diag_means) -> float:
    if cfg.ridge is not None:
        return float(cfg.ridge)
    return max(cfg.ridge_scale * float(np.mean(diag_means)), _RIDGE_FLOOR)


def _ridge_solve(cov_xx, cross_yx, lam):
    """``cross_yx (cov_xx + lam I)^-1`` and its relative normal-equation residual."""
    gram = cov_xx + lam * np.eye(cov_xx.shape[0])
    if not np.any(cross_yx):
        return np.zeros_like(cross_yx), 0.0
    sol = spd_solve_right(gram, cross_yx)
    res = np.linalg.norm(sol @ gram - cross_yx) / (np.linalg.norm(cross_yx) + 1e-300)
    return sol, float(res)


def _receiver_design(data: FeatureData, nbrs, parts):
    """Stack the regressors of one receiver, one column group per (part, source)."""
    cols = []
    for part in parts:
        cols.append(part[:, nbrs, :].reshape(data.samples, -1))
    return np.concatenate(cols, axis=1) if cols else np.zeros((data.samples, 0))


def _tensor_features(data: FeatureData, action_bias: bool) -> np.ndarray:
    act = data.act
    if action_bias:
        act = np.concatenate([act, np.ones(act.shape[:2] + (1,))], axis=2)
    return np.einsum("snh,sna->snha", data.hist, act).reshape(data.samples, data.n, -1)


# ---------------------------------------------------------------- fitting

def _new_model(form, g, data, lam, cfg, **kw):
    return EmbeddingModel(form=form, n=g.n, indptr=np.array(g.indptr), indices=np.array(g.indices),
                          dim=data.dim, action_dim=data.action_dim, ridge=lam,
                          estimator=cfg.estimator, **kw)


def _check_inputs(data: FeatureData, g: Graph):
    if data.n != g.n:
        raise ValueError("feature data node count does not match the graph")
    data.check_finite()


def _joint_dense_blocks(data, g, cfg, parts, widths):
    """Per-receiver joint ridge fits. Returns a list of per-part block arrays."""
    grams = []
    for i in range(g.n):
        nbrs = g.neighborhood(i)
        X = _receiver_design(data, nbrs, parts)
        grams.append(np.mean(np.einsum("sk,sk->k", X, X)) / data.samples)
    lam = _ridge(cfg, grams)
    out = [np.zeros((g.nnz, data.dim, w)) for w in widths]
    worst = 0.0
    for i in range(g.n):
        nbrs = g.neighborhood(i)
        X = _receiver_design(data, nbrs, parts)
        Y = data.obs[:, i, :]
        C, res = _ridge_solve(X.T @ X / data.samples, Y.T @ X / data.samples, lam)
        worst = max(worst, res)
        lo, k, col = g.indptr[i], len(nbrs), 0
        for arr, w in zip(out, widths):
            arr[lo:lo + k] = C[:, col:col + k * w].reshape(data.dim, k, w).transpose(1, 0, 2)
            col += k * w
    return out, lam, worst


def _marginal_action_blocks(mom: Moments, g: Graph, lam: float):
    blocks = np.zeros(mom.cross_oa.shape)
    worst = 0.0
    for e, j in enumerate(g.indices):
        blocks[e], res = _ridge_solve(mom.cov_aa[j], mom.cross_oa[e], lam)
        worst = max(worst, res)
    return blocks, worst


def _marginal_ridge(cfg, mom: Moments):
    diags = [np.trace(c) / c.shape[0] for c in mom.cov_hh]
    diags += [np.trace(c) / c.shape[0] for c in mom.cov_aa]
    return _ridge(cfg, diags)


def fit_dense(data: FeatureData, g: Graph, cfg: FitConfig) -> EmbeddingModel:
    _check_inputs(data, g)
    if cfg.estimator == "joint":
        (hist, act), lam, worst = _joint_dense_blocks(
            data, g, cfg, [data.hist, data.act], [data.dim, data.action_dim])
    else:
        mom = accumulate_moments(data, g)
        lam = _marginal_ridge(cfg, mom)
        hist = np.zeros(mom.cross_oh.shape)
        worst = 0.0
        for e, j in enumerate(g.indices):
            hist[e], res = _ridge_solve(mom.cov_hh[j], mom.cross_oh[e], lam)
            worst = max(worst, res)
        act, res = _marginal_action_blocks(mom, g, lam)
        worst = max(worst, res)
    return _new_model("dense", g, data, lam, cfg, hist_blocks=hist, act_blocks=act,
                      report={"max_normal_residual": worst})


def _average_by_source(pair_blocks, g: Graph):
    shared = np.zeros((g.n,) + pair_blocks.shape[1:])
    counts = np.zeros(g.n)
    np.add.at(shared, g.indices, pair_blocks)
    np.add.at(counts, g.indices, 1.0)
    return shared / counts[:, None, None]


def fit_hom(data: FeatureData, g: Graph, cfg: FitConfig) -> EmbeddingModel:
    """Per-source history operators averaged over the receivers of each source.

    Under the joint estimator the action blocks are then refitted on the
    residual left by the shared history operators.
    """
    _check_inputs(data, g)
    if cfg.estimator == "joint":
        (pair_hist, _), lam, worst = _joint_dense_blocks(
            data, g, cfg, [data.hist, data.act], [data.dim, data.action_dim])
        shared = _average_by_source(pair_hist, g)
        hist_pred = kernels.block_matvec(shared[g.indices], g.indptr, g.indices, data.hist)
        resid = data.obs - hist_pred
        act = np.zeros((g.nnz, data.dim, data.action_dim))
        for i in range(g.n):
            nbrs = g.neighborhood(i)
            A = _receiver_design(data, nbrs, [data.act])
            B, res = _ridge_solve(A.T @ A / data.samples, resid[:, i].T @ A / data.samples, lam)
            worst = max(worst, res)
            lo = g.indptr[i]
            act[lo:lo + len(nbrs)] = B.reshape(data.dim, len(nbrs), data.action_dim).transpose(1, 0, 2)
    else:
        mom = accumulate_moments(data, g)
        lam = _marginal_ridge(cfg, mom)
        pair_hist = np.zeros(mom.cross_oh.shape)
        worst = 0.0
        for e, j in enumerate(g.indices):
            pair_hist[e], res = _ridge_solve(mom.cov_hh[j], mom.cross_oh[e], lam)
            worst = max(worst, res)
        shared = _average_by_source(pair_hist, g)
        act, res = _marginal_action_blocks(mom, g, lam)
        worst = max(worst, res)
    return _new_model("hom", g, data, lam, cfg, hist_blocks=shared, act_blocks=act,
                      report={"max_normal_residual": worst})


def fit_hom_mean(data: FeatureData, g: Graph, cfg: FitConfig, backend=None) -> EmbeddingModel:
    """Shared operator on Gibbs-weighted history means plus per-pair action blocks.

    The joint estimator profiles out each receiver's action blocks, which
    leaves a ``d x d`` system for the shared operator:
    ``C [mean_i (S_hh - S_ha S_aa^-1 S_ah) + lam I] = mean_i (S_yh - S_ya S_aa^-1 S_ah)``.
    """
    _check_inputs(data, g)
    p = cfg.potential
    hbar, _ = _hbar(data, g, p, backend)
    s, d = data.samples, data.dim
    if cfg.estimator == "marginal":
        mom = accumulate_moments(data, g)
        pooled_h = hbar.reshape(-1, d)
        pooled_o = data.obs.reshape(-1, d)
        cov = pooled_h.T @ pooled_h / pooled_h.shape[0]
        lam = _marginal_ridge(cfg, mom)
        C, worst = _ridge_solve(cov, pooled_o.T @ pooled_h / pooled_h.shape[0], lam)
        act, res = _marginal_action_blocks(mom, g, lam)
        return _new_model("hom_mean", g, data, lam, cfg, hist_blocks=C, act_blocks=act,
                          potential=p, report={"max_normal_residual": max(worst, res)})

    designs, diag = [], []
    for i in range(g.n):
        A = _receiver_design(data, g.neighborhood(i), [data.act])
        designs.append(A)
        X = np.concatenate([hbar[:, i], A], axis=1)
        diag.append(np.mean(np.einsum("sk,sk->k", X, X)) / s)
    lam = _ridge(cfg, diag)

    lhs = np.zeros((d, d))
    rhs = np.zeros((d, d))
    pieces = []
    for i in range(g.n):
        A, H, Y = designs[i], hbar[:, i], data.obs[:, i]
        saa = A.T @ A / s + lam * np.eye(A.shape[1])
        sha = H.T @ A / s
        sya = Y.T @ A / s
        # saa^-1 applied on the right
        sha_inv = spd_solve_right(saa, sha)
        sya_inv = spd_solve_right(saa, sya)
        lhs += H.T @ H / s - sha_inv @ sha.T
        rhs += Y.T @ H / s - sya_inv @ sha.T
        pieces.append((saa, sha, sya))
    lhs = lhs / g.n + lam * np.eye(d)
    rhs /= g.n
    if np.any(rhs):
        C = spd_solve_right(lhs, rhs)
    else:
        C = np.zeros((d, d))
    worst = float(np.linalg.norm(C @ lhs - rhs) / (np.linalg.norm(rhs) + 1e-300)) if np.any(rhs) else 0.0
    act = np.zeros((g.nnz, d, data.action_dim))
    for i, (saa, sha, sya) in enumerate(pieces):
        target = sya - C @ sha
        if np.any(target):
            B = spd_solve_right(saa, target)
            worst = max(worst, float(np.linalg.norm(B @ saa - target)
                                     / (np.linalg.norm(target) + 1e-300)))
        else:
            B = np.zeros_like(target)
        k = len(g.neighborhood(i))
        lo = g.indptr[i]
        act[lo:lo + k] = B.reshape(d, k, data.action_dim).transpose(1, 0, 2)
    return _new_model("hom_mean", g, data, lam, cfg, hist_blocks=C, act_blocks=act,
                      potential=p, report={"max_normal_residual": worst})


def _hbar(data, g, p, backend=None):
    w = edge_weights(g, data.hist, p, backend=backend)
    return aggregate_history(g, data.hist, w, backend=backend), w


def fit_tensor(data: FeatureData, g: Graph, cfg: FitConfig) -> EmbeddingModel:
    """Per-pair operators on the vectorized outer product ``psi_h ⊗ [psi_a, 1]``."""
    _check_inputs(data, g)
    width = data.dim * (data.action_dim + (1 if cfg.action_bias else 0))
    if width > TENSOR_GUARD:
        raise ValueError(f"tensor feature size {width} exceeds the guard of {TENSOR_GUARD}")
    z = _tensor_features(data, cfg.action_bias)
    if cfg.estimator == "joint":
        (blocks,), lam, worst = _joint_dense_blocks(data, g, cfg, [z], [width])
    else:
        s = data.samples
        cov_zz = np.einsum("sni,snj->nij", z, z) / s
        lam = _ridge(cfg, [np.trace(c) / c.shape[0] for c in cov_zz])
        blocks = np.zeros((g.nnz, data.dim, width))
        worst = 0.0
        for e, (i, j) in enumerate(zip(g.receivers, g.indices)):
            blocks[e], res = _ridge_solve(cov_zz[j], data.obs[:, i].T @ z[:, j] / s, lam)
            worst = max(worst, res)
    return _new_model("tensor", g, data, lam, cfg, tensor_blocks=blocks,
                      action_bias=cfg.action_bias, report={"max_normal_residual": worst})


def fit(data: FeatureData, g: Graph, cfg: FitConfig, backend=None) -> EmbeddingModel:
    if cfg.form == "dense":
        return fit_dense(data, g, cfg)
    if cfg.form == "hom":
        return fit_hom(data, g, cfg)
    if cfg.form == "hom_mean":
        return fit_hom_mean(data, g, cfg, backend=backend)
    return fit_tensor(data, g, cfg)


# ---------------------------------------------------------------- prediction

def _batch(x, n, width, name):
    x = np.asarray(x, dtype=float)
    if x.ndim < 2 or x.shape[-2] != n or x.shape[-1] != width:
        raise ValueError(f"{name} must have shape (..., {n}, {width}), got {x.shape}")
    lead = x.shape[:-2]
    return x.reshape((-1, n, width)), lead


def predict_one_step(model: EmbeddingModel, g: Graph, psi_h, psi_a, weights=None,
                     backend=None) -> np.ndarray:
    """Expected next observation features for every node.

    ``psi_h``/``psi_a`` may carry leading batch dimensions. For ``hom_mean``
    the Gibbs weights are recomputed from ``psi_h`` unless ``weights`` (CSR,
    matching batch) is supplied.
    """
    model.check_graph(g)
    h, lead = _batch(psi_h, g.n, model.dim, "psi_h")
    a, lead_a = _batch(psi_a, g.n, model.action_dim, "psi_a")
    if lead != lead_a:
        raise ValueError("history and action batches differ")
    if model.form == "tensor":
        if model.action_bias:
            a = np.concatenate([a, np.ones(a.shape[:2] + (1,))], axis=2)
        z = np.einsum("bnh,bna->bnha", h, a).reshape(h.shape[0], g.n, -1)
        out = kernels.block_matvec(model.tensor_blocks, g.indptr, g.indices, z, backend=backend)
        return out.reshape(lead + (g.n, model.dim))
    if model.form == "hom_mean":
        if weights is None:
            weights = edge_weights(g, h, model.potential, backend=backend)
        hbar = aggregate_history(g, h, np.asarray(weights).reshape(-1, g.nnz), backend=backend)
        out = hbar @ model.hist_blocks.T
    else:
        out = kernels.block_matvec(model.pair_history_blocks, g.indptr, g.indices, h,
                                   backend=backend)
    out = out + kernels.block_matvec(model.act_blocks, g.indptr, g.indices, a, backend=backend)
    return out.reshape(lead + (g.n, model.dim))


def rollout(model: EmbeddingModel, g: Graph, psi0, psi_a_seq, weights=None, reencode=None,
            backend=None) -> np.ndarray:
    """Autoregressive feature rollout of length ``M = len(psi_a_seq)``.

    Predicted observation features become the next history features.
    ``weights`` (``(M, nnz)``) freezes the ``hom_mean`` Gibbs weights;
    ``reencode=(decoder, feature_map)`` instead decodes and re-encodes each
    prediction before feeding it back, which is useful for diagnostics.
    """
    psi_a_seq = np.asarray(psi_a_seq, dtype=float)
    if psi_a_seq.ndim != 3 or psi_a_seq.shape[0] < 1:
        raise ValueError("psi_a_seq must be an (M, N, d_a) array with M >= 1")
    cur = np.asarray(psi0, dtype=float)
    out = np.empty((psi_a_seq.shape[0], g.n, model.dim))
    for t in range(psi_a_seq.shape[0]):
        w = None if weights is None else weights[t]
        nxt = predict_one_step(model, g, cur, psi_a_seq[t], weights=w, backend=backend)
        out[t] = nxt
        if reencode is not None:
            dec, fmap = reencode
            nxt = encode_graph(fmap, g, decode(dec, nxt))
        cur = nxt
    return out


def history_operator(model: EmbeddingModel, g: Graph, weights=None) -> sparse.bsr_matrix:
    """Sparse ``(N d) x (N d)`` matrix of the (frozen-weight) history map."""
    model.check_graph(g)
    if model.form == "hom_mean":
        if weights is None:
            raise ValueError("hom_mean needs frozen weights to be linear in history")
        blocks = np.asarray(weights)[:, None, None] * model.hist_blocks[None]
    else:
        blocks = model.pair_history_blocks
    d = model.dim
    return sparse.bsr_matrix((blocks, g.indices, g.indptr), shape=(g.n * d, g.n * d))


def action_operator(model: EmbeddingModel, g: Graph) -> sparse.bsr_matrix:
    """Sparse ``(N d) x (N d_a)`` matrix of the action map."""
    model.check_graph(g)
    if model.form == "tensor":
        raise ValueError("the tensor form is not linear in the action features")
    return sparse.bsr_matrix((model.act_blocks, g.indices, g.indptr),
                             shape=(g.n * model.dim, g.n * model.action_dim))


# ---------------------------------------------------------------- evaluation

def nrmse_curve(pred_obs: np.ndarray, true_obs: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Per-step NRMSE: RMS over nodes/coords of ``(pred - true) / scale``."""
    err = (pred_obs - true_obs) / scale
    axes = tuple(range(1, err.ndim))
    return np.sqrt(np.mean(err * err, axis=axes))


def pooled_std(trajectories, horizon=None) -> np.ndarray:
    obs = np.concatenate([t.observations[1:(None if horizon is None else horizon + 1)]
                          .reshape(-1, t.observations.shape[-1]) for t in trajectories])
    std = obs.std(axis=0)
    if np.any(std == 0):
        raise ValueError("ground-truth observations have zero variance in some coordinate")
    return std


def prediction_nrmse(model: EmbeddingModel, g: Graph, fmap: FeatureMap, proj: ActionProjection,
                     decoder: Decoder, trajectories, horizon: int, per_trajectory=False,
                     backend=None) -> np.ndarray:
    """NRMSE of decoded open-loop rollouts against ground truth, for steps 1..horizon.

    Errors are normalized per coordinate by the ground-truth standard
    deviation pooled over the test set. Returns ``(horizon,)`` pooled over
    trajectories, or ``(n_traj, horizon)`` with ``per_trajectory``.
    """
    trajectories = list(trajectories)
    if any(t.length < horizon for t in trajectories):
        raise ValueError("horizon exceeds trajectory length")
    scale = pooled_std(trajectories, horizon)
    curves, sq = [], []
    for tr in trajectories:
        psi0 = encode_graph(fmap, g, tr.observations[0])
        psi_a = encode_action(proj, tr.actions[:horizon])
        pred = decode(decoder, rollout(model, g, psi0, psi_a, backend=backend))
        err = (pred - tr.observations[1:horizon + 1]) / scale
        sq.append(np.mean(err * err, axis=(1, 2)))
        curves.append(np.sqrt(sq[-1]))
    if per_trajectory:
        return np.array(curves)
    return np.sqrt(np.mean(sq, axis=0))


# ---------------------------------------------------------------- persistence

_ARRAY_FIELDS = ("indptr", "indices", "hist_blocks", "act_blocks", "tensor_blocks")


def save_model(model: EmbeddingModel, directory, extra: dict | None = None,
               arrays: dict | None = None) -> str:
    """Write ``model.json`` and ``model.bin`` (float64 little-endian, C order).

    ``arrays`` adds further named arrays (e.g. decoder weights) to the binary;
    they come back from :func:`load_model` under ``extra["arrays"]``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layout, chunks, offset = [], [], 0
    named = [(name, getattr(model, name)) for name in _ARRAY_FIELDS]
    named += sorted((arrays or {}).items())
    for name, arr in named:
        if arr is None:
            continue
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset,
                       "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    (directory / "model.bin").write_bytes(blob)
    manifest = {
        "format": "kgraphctl-model/1",
        "form": model.form, "n": model.n, "dim": model.dim, "action_dim": model.action_dim,
        "ridge": model.ridge, "estimator": model.estimator,
        "potential": model.potential.to_json() if model.potential else None,
        "action_bias": model.action_bias,
        "layout": "row-major float64 little-endian",
        "arrays": layout,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "report": model.report,
        "extra": extra or {},
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (directory / "model.json").write_text(text + "\n")
    return hashlib.sha256(text.encode() + blob).hexdigest()


def load_model(directory) -> tuple[EmbeddingModel, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    blob = (directory / "model.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError("model.bin checksum mismatch")
    arrays = {}
    for entry in manifest["arrays"]:
        chunk = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise ValueError("model.bin is truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).copy()
    pot = manifest["potential"]
    model = EmbeddingModel(
        form=manifest["form"], n=manifest["n"],
        indptr=arrays["indptr"].astype(np.int64), indices=arrays["indices"].astype(np.int64),
        dim=manifest["dim"], action_dim=manifest["action_dim"], ridge=manifest["ridge"],
        estimator=manifest["estimator"], hist_blocks=arrays.get("hist_blocks"),
        act_blocks=arrays.get("act_blocks"), tensor_blocks=arrays.get("tensor_blocks"),
        potential=GibbsPotential(**pot) if pot else None, action_bias=manifest["action_bias"],
        report=manifest.get("report", {}))
    extra = dict(manifest.get("extra", {}))
    extra["arrays"] = {k: v for k, v in arrays.items() if k not in _ARRAY_FIELDS}
    return model, extra
