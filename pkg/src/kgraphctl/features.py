"""Explicit feature maps, the fixed action projection and the linear decoder.

Observation/history features come from a fixed map (random Fourier features
for a Gaussian kernel, monomials, or the identity) applied either to a node's
own observation or to ``[o_i || mean of neighbor observations]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np
from scipy import linalg

from .graph import Graph

KINDS = ("rff", "polynomial", "identity")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Fixed finite-dimensional feature map.

    ``input_dim`` is the per-node observation dimension; with ``augment`` the
    map actually consumes ``2 * input_dim`` numbers (own observation followed
    by the neighbor mean). For ``kind == "rff"`` the frequencies ``W`` and
    phases ``b`` are regenerated from ``seed``; they are never serialized.
    """

    kind: str
    input_dim: int
    dim: int
    gamma: float | None = None
    seed: int | None = None
    degree: int | None = None
    augment: bool = False
    W: np.ndarray | None = field(default=None, repr=False)
    b: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "rff" and self.W is None:
            if self.dim < 1 or self.gamma is None or self.gamma <= 0:
                raise ValueError("rff maps need dim >= 1 and gamma > 0")
            rng = np.random.default_rng(self.seed)
            W = rng.normal(0.0, 1.0 / self.gamma, size=(self.dim, self.raw_dim))
            b = rng.uniform(0.0, 2.0 * np.pi, size=self.dim)
            W.setflags(write=False)
            b.setflags(write=False)
            object.__setattr__(self, "W", W)
            object.__setattr__(self, "b", b)

    @property
    def raw_dim(self) -> int:
        return self.input_dim * (2 if self.augment else 1)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Apply the map to raw inputs of shape ``(..., raw_dim)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.raw_dim:
            raise ValueError(f"expected inputs of size {self.raw_dim}, got {x.shape[-1]}")
        if self.kind == "rff":
            return np.sqrt(2.0 / self.dim) * np.cos(x @ self.W.T + self.b)
        if self.kind == "identity":
            return x.copy()
        return _monomials(x, self.degree)

    def to_json(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "dim": self.dim,
                "gamma": self.gamma, "seed": self.seed, "degree": self.degree,
                "augment": self.augment}

    @classmethod
    def from_json(cls, blob: dict) -> "FeatureMap":
        return cls(**blob)


def _monomials(x, degree):
    n = x.shape[-1]
    cols = [np.ones(x.shape[:-1])]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n), deg):
            cols.append(np.prod(x[..., list(combo)], axis=-1))
    return np.stack(cols, axis=-1)


def sample_rff_map(input_dim: int, d: int, gamma: float, seed, augment: bool = False) -> FeatureMap:
    """Random Fourier features approximating ``exp(-|x - y|^2 / (2 gamma^2))``."""
    return FeatureMap("rff", input_dim, d, gamma=float(gamma), seed=seed, augment=augment)


def polynomial_map(input_dim: int, degree: int, augment: bool = False) -> FeatureMap:
    """All monomials up to ``degree`` (constant first, graded lexicographic)."""
    if degree not in (1, 2):
        raise ValueError("polynomial features support degree 1 or 2")
    raw = input_dim * (2 if augment else 1)
    return FeatureMap("polynomial", input_dim, comb(raw + degree, degree),
                      degree=degree, augment=augment)


def identity_map(input_dim: int, augment: bool = False) -> FeatureMap:
    return FeatureMap("identity", input_dim, input_dim * (2 if augment else 1), augment=augment)


def median_bandwidth(x: np.ndarray, max_samples: int = 1000, seed=0) -> float:
    """Median pairwise Euclidean distance of (a subsample of) the rows of ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1, np.shape(x)[-1])
    if x.shape[0] > max_samples:
        rng = np.random.default_rng(seed)
        x = x[rng.choice(x.shape[0], max_samples, replace=False)]
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    iu = np.triu_indices(x.shape[0], 1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def map_inputs(fmap: FeatureMap, g: Graph, obs: np.ndarray) -> np.ndarray:
    """Raw map inputs for all nodes; ``obs`` has shape ``(..., N, d_o)``."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != fmap.input_dim:
        raise ValueError(f"observation dim {obs.shape[-1]} != map input dim {fmap.input_dim}")
    if obs.shape[-2] != g.n:
        raise ValueError("observation node count does not match the graph")
    if not fmap.augment:
        return obs
    adj = g.adjacency.astype(float)
    deg = adj.sum(axis=1)
    nbr_sum = np.einsum("ij,...jd->...id", adj, obs)
    nbr_mean = np.divide(nbr_sum, deg[:, None], out=np.zeros_like(nbr_sum),
                         where=deg[:, None] > 0)
    return np.concatenate([obs, nbr_mean], axis=-1)


def encode_graph(fmap: FeatureMap, g: Graph, obs: np.ndarray) -> np.ndarray:
    """Features for every node, shape ``(..., N, dim)``."""
    return fmap.transform(map_inputs(fmap, g, obs))


def encode_node(fmap: FeatureMap, g: Graph, obs: np.ndarray, i: int) -> np.ndarray:
    """Feature vector of node ``i`` given all node observations at one step."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2:
        raise ValueError("obs must be an (N, d_o) array")
    if obs.shape[1] != fmap.input_dim:
        raise ValueError(f"observation dim {obs.shape[1]} != map input dim {fmap.input_dim}")
    own = obs[i]
    if not fmap.augment:
        return fmap.transform(own)
    others = [j for j in g.neighborhood(i) if j != i]
    mean = obs[others].mean(axis=0) if others else np.zeros_like(own)
    return fmap.transform(np.concatenate([own, mean]))


@dataclass(frozen=True, eq=False)
class ActionProjection:
    """Linear action features ``psi_a = P a`` with orthonormal columns of ``P``."""

    P: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] < P.shape[1]:
            raise ValueError("P must be a tall (d_a x dim_a) matrix")
        if not np.allclose(P.T @ P, np.eye(P.shape[1]), atol=1e-10):
            raise ValueError("columns of P must be orthonormal")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def feature_dim(self) -> int:
        return self.P.shape[0]

    @property
    def action_dim(self) -> int:
        return self.P.shape[1]

    def to_json(self) -> dict:
        return {"P": self.P.tolist()}


def make_action_projection(action_dim: int, feature_dim: int | None = None, seed=0) -> ActionProjection:
    """Identity when ``feature_dim == action_dim``, else seeded QR columns."""
    feature_dim = action_dim if feature_dim is None else feature_dim
    if feature_dim == action_dim:
        return ActionProjection(np.eye(action_dim))
    if feature_dim < action_dim:
        raise ValueError("action feature dim must be at least the action dim")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(feature_dim, action_dim)))
    return ActionProjection(q)


def encode_action(proj: ActionProjection, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != proj.action_dim:
        raise ValueError(f"action dim {a.shape[-1]} != projection input dim {proj.action_dim}")
    return a @ proj.P.T


def decode_action(proj: ActionProjection, psi_a: np.ndarray) -> np.ndarray:
    psi_a = np.asarray(psi_a, dtype=float)
    if psi_a.shape[-1] != proj.feature_dim:
        raise ValueError(f"action feature dim {psi_a.shape[-1]} != {proj.feature_dim}")
    return psi_a @ proj.P


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class Decoder:
    """Linear map from features back to observations, ``o ≈ D psi``."""

    D: np.ndarray
    rho: float = 0.0

    @property
    def feature_dim(self) -> int:
        return self.D.shape[1]


def spd_solve_right(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``X @ gram = rhs`` for symmetric positive-definite ``gram``."""
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise SingularSystemError("normal equations are singular; use a positive ridge") from exc
    return linalg.cho_solve(factor, rhs.T).T


def fit_decoder(features: np.ndarray, targets: np.ndarray, rho: float = 1e-8) -> Decoder:
    """Ridge solution of ``D (sum psi psi^T + rho I) = sum o psi^T``."""
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    features = features.reshape(-1, features.shape[-1])
    targets = targets.reshape(-1, targets.shape[-1])
    if features.shape[0] == 0 or features.shape[0] != targets.shape[0]:
        raise ValueError("need matching, non-empty feature and target samples")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    gram = features.T @ features + rho * np.eye(features.shape[1])
    cross = targets.T @ features
    if rho == 0 and np.linalg.cond(gram) > 1e14:
        raise SingularSystemError("feature Gram matrix is singular; use rho > 0")
    if not np.any(cross):
        return Decoder(np.zeros_like(cross), rho)
    return Decoder(spd_solve_right(gram, cross), rho)


def decoder_residual(dec: Decoder, features: np.ndarray, targets: np.ndarray) -> float:
    """Relative residual of the decoder normal equations."""
    features = np.asarray(features).reshape(-1, dec.feature_dim)
    targets = np.asarray(targets).reshape(features.shape[0], -1)
    gram = features.T @ features + dec.rho * np.eye(dec.feature_dim)
    cross = targets.T @ features
    return float(np.linalg.norm(dec.D @ gram - cross) / max(np.linalg.norm(cross), 1e-300))


def decode(dec: Decoder, psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.shape[-1] != dec.feature_dim:
        raise ValueError(f"feature dim {psi.shape[-1]} != decoder input dim {dec.feature_dim}")
    return psi @ dec.D.T
