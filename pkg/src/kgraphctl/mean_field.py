"""Boltzmann-Gibbs neighbor weights and weighted history aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .graph import Graph

_KIND_CODES = {"gaussian": kernels.GAUSSIAN, "laplace": kernels.LAPLACE, "vmf": kernels.VMF}


@dataclass(frozen=True)
class GibbsPotential:
    """Pairwise negative energy.

    gaussian: ``-|x - y|_2^2 / (2 scale^2)``; laplace: ``-|x - y|_1 / scale``;
    vmf: ``scale * cos(x, y)`` (``scale`` is the concentration and may be 0).
    """

    kind: str = "gaussian"
    scale: float = 2.0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown potential {self.kind!r}")
        if self.kind == "vmf":
            if self.scale < 0:
                raise ValueError("vmf concentration must be >= 0")
        elif not self.scale > 0:
            raise ValueError(f"{self.kind} scale must be > 0")

    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    def to_json(self) -> dict:
        return {"kind": self.kind, "scale": self.scale}


@dataclass(frozen=True)
class WeightVector:
    node: int
    neighbors: np.ndarray
    weights: np.ndarray


def potential(p: GibbsPotential, psi_i, psi_j) -> float:
    psi_i = np.asarray(psi_i, dtype=float)
    psi_j = np.asarray(psi_j, dtype=float)
    if psi_i.shape != psi_j.shape:
        raise ValueError("feature dimensions differ")
    if p.kind == "gaussian":
        diff = psi_i - psi_j
        return float(-(diff @ diff) / (2.0 * p.scale ** 2))
    if p.kind == "laplace":
        return float(-np.abs(psi_i - psi_j).sum() / p.scale)
    ni, nj = np.linalg.norm(psi_i), np.linalg.norm(psi_j)
    if ni == 0 or nj == 0:
        raise ValueError("von Mises-Fisher potential is undefined for a zero feature")
    return float(p.scale * (psi_i / ni) @ (psi_j / nj))


def _batched(features):
    features = np.asarray(features, dtype=float)
    lead = features.shape[:-2]
    return features.reshape((-1,) + features.shape[-2:]), lead


def edge_weights(g: Graph, features: np.ndarray, p: GibbsPotential, backend=None) -> np.ndarray:
    """Weights for every CSR pair; ``features`` is ``(..., N, d)``, result ``(..., nnz)``.

    The softmax subtracts each neighborhood's maximum potential before
    exponentiating, so tiny scales do not overflow.
    """
    flat, lead = _batched(features)
    if flat.shape[1] != g.n:
        raise ValueError("feature node count does not match the graph")
    w = kernels.gibbs_weights(flat, g.indptr, g.indices, p.code, p.scale, backend=backend)
    return w.reshape(lead + (g.nnz,))


def gibbs_weights(g: Graph, features: np.ndarray, p: GibbsPotential, i: int) -> WeightVector:
    """Weights of node ``i`` over its inclusive neighborhood."""
    nbrs = g.neighborhood(i)
    features = np.asarray(features, dtype=float)
    pots = np.array([potential(p, features[i], features[j]) for j in nbrs])
    ex = np.exp(pots - pots.max())
    return WeightVector(i, nbrs, ex / ex.sum())


def aggregate_history(g: Graph, features: np.ndarray, weights, backend=None) -> np.ndarray:
    """``h_bar_i = sum_{j in E(i)} alpha_ij psi_j``.

    ``weights`` is either a CSR weight array ``(..., nnz)`` or a list of
    :class:`WeightVector`, one per node.
    """
    if isinstance(weights, (list, tuple)):
        if sorted(wv.node for wv in weights) != list(range(g.n)):
            raise ValueError("need exactly one weight vector per node")
        w = np.empty(g.nnz)
        for wv in weights:
            lo, hi = g.indptr[wv.node], g.indptr[wv.node + 1]
            if not np.array_equal(g.indices[lo:hi], wv.neighbors):
                raise ValueError(f"weight vector of node {wv.node} does not match its neighborhood")
            w[lo:hi] = wv.weights
        weights = w
    flat, lead = _batched(features)
    w = np.asarray(weights, dtype=float).reshape(-1, g.nnz)
    if w.shape[0] != flat.shape[0]:
        raise ValueError("weights and features have different batch sizes")
    out = kernels.aggregate(flat, g.indptr, g.indices, w, backend=backend)
    return out.reshape(lead + out.shape[1:])


def mean_field_features(g: Graph, features: np.ndarray, p: GibbsPotential, backend=None):
    """Aggregated features together with the weights that produced them."""
    w = edge_weights(g, features, p, backend=backend)
    return aggregate_history(g, features, w, backend=backend), w


def weight_matrix(g: Graph, weights: np.ndarray) -> np.ndarray:
    """Dense ``N x N`` matrix view of one set of CSR weights."""
    m = np.zeros((g.n, g.n))
    m[g.receivers, g.indices] = weights
    return m
