"""Graph topology, trajectory containers and dataset (de)serialization."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class MaxRetriesExceeded(RuntimeError):
    """Raised when rejection sampling never produced a connected graph."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with a symmetric binary adjacency and no self-loops.

    Neighborhoods are *inclusive*: node ``i`` always belongs to its own
    neighborhood. The CSR arrays ``indptr``/``indices`` enumerate those
    inclusive neighborhoods in ascending node order and fix the edge ordering
    used by every per-pair array in the package.
    """

    adjacency: np.ndarray
    indptr: np.ndarray = field(init=False, repr=False)
    indices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        adj = np.asarray(self.adjacency)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise ValueError("adjacency must be a non-empty square matrix")
        adj = (adj != 0).astype(np.int8)
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(adj)):
            raise ValueError("adjacency must have a zero diagonal")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

        inclusive = adj.astype(bool) | np.eye(adj.shape[0], dtype=bool)
        counts = inclusive.sum(axis=1)
        indptr = np.zeros(adj.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = np.nonzero(inclusive)[1].astype(np.int64)
        indptr.setflags(write=False)
        indices.setflags(write=False)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[tuple[int, int]]) -> "Graph":
        adj = np.zeros((n, n), dtype=np.int8)
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            adj[i, j] = adj[j, i] = 1
        return cls(adj)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def nnz(self) -> int:
        """Number of (receiver, source) pairs over inclusive neighborhoods."""
        return int(self.indptr[-1])

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.int64)

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Unordered edge list ``(i, j)`` with ``i < j``."""
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))

    @property
    def receivers(self) -> np.ndarray:
        """Receiver node of every CSR entry."""
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def neighborhood(self, i: int) -> np.ndarray:
        return inclusive_neighborhood(self, i)

    def is_connected(self) -> bool:
        ncomp, _ = connected_components(csr_matrix(self.adjacency), directed=False)
        return ncomp == 1

    def edge_index(self, i: int, j: int) -> int:
        """CSR position of the pair (receiver ``i``, source ``j``)."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        pos = lo + np.searchsorted(self.indices[lo:hi], j)
        if pos >= hi or self.indices[pos] != j:
            raise KeyError(f"{j} is not in the neighborhood of {i}")
        return int(pos)

    def to_json(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, blob: dict) -> "Graph":
        return cls.from_edges(blob["n"], [tuple(e) for e in blob["edges"]])

    def fingerprint(self) -> str:
        return hashlib.sha256(self.adjacency.tobytes() + str(self.n).encode()).hexdigest()[:16]


def inclusive_neighborhood(g: Graph, i: int) -> np.ndarray:
    """Sorted node indices ``{j : adjacency[i, j] = 1} ∪ {i}``."""
    if not 0 <= i < g.n:
        raise IndexError(f"node {i} out of range for a graph with {g.n} nodes")
    return g.indices[g.indptr[i]:g.indptr[i + 1]]


def chain_graph(n: int) -> Graph:
    """Path graph 0-1-...-(n-1)."""
    if n < 2:
        raise ValueError("a chain needs at least two nodes")
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def ring_graph(n: int) -> Graph:
    if n < 3:
        raise ValueError("a ring needs at least three nodes")
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def complete_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def single_node_graph() -> Graph:
    return Graph(np.zeros((1, 1), dtype=np.int8))


def generate_erdos_renyi(n: int, p: float, seed, max_retries: int = 1000) -> Graph:
    """Connected G(n, p) graph by resampling the whole graph until connected.

    Rejection keeps the Erdős–Rényi law conditioned on connectivity, unlike
    patching in extra edges.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    for _ in range(max_retries):
        draw = rng.random(iu[0].size) < p
        adj = np.zeros((n, n), dtype=np.int8)
        adj[iu[0][draw], iu[1][draw]] = 1
        adj = adj + adj.T
        g = Graph(adj)
        if g.is_connected():
            return g
    raise MaxRetriesExceeded(
        f"no connected G({n}, {p}) graph after {max_retries} draws; p is too small for n"
    )


@dataclass
class Trajectory:
    """One episode.

    ``observations`` has shape ``(M + 1, N, d_o)``: index 0 is the initial
    observation, index ``t`` the observation after applying ``actions[t - 1]``.
    The history paired with target ``observations[t]`` is
    ``observations[t - 1]``.
    """

    observations: np.ndarray
    actions: np.ndarray
    seed: int | None = None
    graph_id: str = ""

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.observations.ndim != 3 or self.actions.ndim != 3:
            raise ValueError("observations and actions must be (steps, nodes, dim) arrays")
        if self.observations.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("need exactly one more observation than actions")
        if self.observations.shape[1] != self.actions.shape[1]:
            raise ValueError("node count differs between observations and actions")

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def histories(self) -> np.ndarray:
        return self.observations[:-1]

    @property
    def targets(self) -> np.ndarray:
        return self.observations[1:]


@dataclass
class Dataset:
    graph: Graph
    trajectories: list[Trajectory]
    env_config: dict = field(default_factory=dict)
    master_seed: int | None = None

    def __post_init__(self):
        if not self.trajectories:
            return
        obs_dim, act_dim = self.obs_dim, self.action_dim
        for tr in self.trajectories:
            if tr.observations.shape[1] != self.graph.n:
                raise ValueError("trajectory node count does not match the graph")
            if tr.observations.shape[2] != obs_dim or tr.actions.shape[2] != act_dim:
                raise ValueError("trajectories disagree on observation/action dims")

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].observations.shape[2]

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].actions.shape[2]

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.graph, self.trajectories[:count], self.env_config, self.master_seed)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(histories, actions, targets) stacked in (trajectory, step) order."""
        hist = np.concatenate([t.histories for t in self.trajectories])
        act = np.concatenate([t.actions for t in self.trajectories])
        tgt = np.concatenate([t.targets for t in self.trajectories])
        return hist, act, tgt


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(ds: Dataset, directory) -> str:
    """Write ``manifest.json`` plus one CSV per trajectory; returns a checksum.

    Each CSV starts with a ``#`` metadata line (toolkit version and a hash of
    the generating configuration) followed by the header. Columns are ``t, node, obs_0..obs_{d_o-1}, act_0..act_{d_a-1}`` for
    ``t = 0..M``; row ``t`` carries the action applied *after* observation
    ``t``, so the final row's action cells are ``nan``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d_o, d_a = ds.obs_dim, ds.action_dim
    header = ["t", "node"] + [f"obs_{k}" for k in range(d_o)] + [f"act_{k}" for k in range(d_a)]
    from . import __version__
    config = json.dumps({"env_config": ds.env_config, "master_seed": ds.master_seed},
                        sort_keys=True, default=str)
    meta = (f"# kgraphctl {__version__} command=generate "
            f"config={hashlib.sha256(config.encode()).hexdigest()[:16]}\n")
    files = []
    for idx, tr in enumerate(ds.trajectories):
        name = f"traj_{idx:05d}.csv"
        with open(directory / name, "w", newline="") as fh:
            fh.write(meta)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t in range(tr.observations.shape[0]):
                for node in range(ds.graph.n):
                    acts = tr.actions[t, node] if t < tr.length else [np.nan] * d_a
                    w.writerow([t, node] + [_fmt(v) for v in tr.observations[t, node]]
                               + [_fmt(v) for v in acts])
        files.append({"name": name, "length": tr.length, "seed": tr.seed,
                      "sha256": _file_digest(directory / name)})
    manifest = {
        "format": "kgraphctl-dataset/1",
        "columns": header,
        "graph": ds.graph.to_json(),
        "obs_dim": d_o,
        "action_dim": d_a,
        "master_seed": ds.master_seed,
        "env_config": ds.env_config,
        "trajectories": files,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (directory / "manifest.json").write_text(text + "\n")
    return hashlib.sha256(text.encode()).hexdigest()


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    graph = Graph.from_json(manifest["graph"])
    d_o, d_a = manifest["obs_dim"], manifest["action_dim"]
    trajs = []
    for entry in manifest["trajectories"]:
        with open(directory / entry["name"]) as fh:
            rows = [ln for ln in fh if not ln.startswith("#")][1:]
        raw = np.loadtxt(rows, delimiter=",", ndmin=2)
        m = entry["length"]
        body = raw[:, 2:].reshape(m + 1, graph.n, d_o + d_a)
        trajs.append(Trajectory(body[:, :, :d_o].copy(), body[:m, :, d_o:].copy(),
                                seed=entry.get("seed"), graph_id=graph.fingerprint()))
    return Dataset(graph, trajs, manifest.get("env_config", {}), manifest.get("master_seed"))
