"""Ground-truth environments and dataset generation.

Three environments share a small interface (``reset`` / ``rollout``):

* :class:`RopeEnv` - a hanging mass-spring chain; the top mass slides on a
  horizontal rail and is pushed by the control force.
* :class:`GridEnv` - voltage magnitudes on a random network following damped
  Laplacian consensus with a restoring pull toward the reference voltage;
  generators take control inputs, loads receive random disturbances.
* :class:`LinearGraphEnv` - ``x_i' = A sum_j w_ij x_j + B u_i + noise`` with
  known operators, optionally with state-dependent Gibbs weights.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import kernels
from .graph import (Dataset, Graph, Trajectory, chain_graph, complete_graph, generate_erdos_renyi,
                    ring_graph, single_node_graph)
from .mean_field import GibbsPotential, edge_weights, weight_matrix


def derive_rng(master_seed, *keys) -> np.random.Generator:
    """Independent stream identified by ``(master_seed, *keys)``."""
    entropy = [0 if master_seed is None else int(master_seed)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


# stream identifiers
_GRAPH, _EPISODE, _NOISE, _EXTRA = 11, 23, 37, 53


class _Config:
    kind = ""

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        out.update(asdict(self))
        return out

    @classmethod
    def from_json(cls, blob: dict):
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in blob.items() if k in names}
        for k, v in kwargs.items():
            if isinstance(v, list) and k.endswith("range"):
                kwargs[k] = tuple(v)
        return cls(**kwargs)


# ---------------------------------------------------------------- rope

@dataclass
class RopeConfig(_Config):
    n_masses: int = 6
    mass: float = 1.0
    stiffness: float = 500.0
    rest_length: float = 0.1
    damping: float = 0.5
    gravity: float = 9.81
    dt: float = 0.01
    u_max: float = 20.0
    init_offset: float = 0.1
    init_lateral_std: float = 0.02
    init_vel_std: float = 0.1
    two_hop: bool = False
    kind = "rope"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if min(self.stiffness, self.damping, self.mass, self.gravity) < 0 or self.mass == 0:
            raise ValueError("physical parameters must be non-negative (mass positive)")
        if self.n_masses < 2:
            raise ValueError("a rope needs at least two masses")


def rope_graph(n: int, two_hop: bool = False) -> Graph:
    g = chain_graph(n)
    if not two_hop:
        return g
    edges = g.edges + [(i, i + 2) for i in range(n - 2)]
    return Graph.from_edges(n, edges)


def rope_equilibrium(cfg: RopeConfig, top_x: float = 0.0) -> np.ndarray:
    """Positions of the vertically hanging rope at rest; link ``i`` carries the
    weight of every mass below it."""
    n = cfg.n_masses
    pos = np.zeros((n, 2))
    pos[:, 0] = top_x
    for i in range(n - 1):
        below = n - 1 - i
        stretch = cfg.rest_length + cfg.mass * cfg.gravity * below / cfg.stiffness
        pos[i + 1, 1] = pos[i, 1] - stretch
    return pos


@dataclass
class RopeState:
    pos: np.ndarray
    vel: np.ndarray

    @property
    def observation(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel], axis=1)

    @classmethod
    def from_observation(cls, obs) -> "RopeState":
        obs = np.asarray(obs, dtype=float)
        return cls(obs[:, :2].copy(), obs[:, 2:].copy())


def rope_step(state: RopeState, u: float, cfg: RopeConfig, backend=None) -> RopeState:
    """One semi-implicit Euler step (velocities first, then positions)."""
    if not (np.all(np.isfinite(state.pos)) and np.all(np.isfinite(state.vel)) and np.isfinite(u)):
        raise FloatingPointError("non-finite rope state or action")
    out = kernels.rope_rollout(state.pos, state.vel, np.array([u], dtype=float), cfg.mass,
                               cfg.stiffness, cfg.rest_length, cfg.damping, cfg.gravity, cfg.dt,
                               backend=backend)
    return RopeState.from_observation(out[1])


def rope_energy(obs: np.ndarray, cfg: RopeConfig) -> float:
    """Kinetic + spring + gravitational energy (the top mass's height is fixed)."""
    obs = np.asarray(obs)
    pos, vel = obs[:, :2], obs[:, 2:]
    kinetic = 0.5 * cfg.mass * np.sum(vel * vel)
    lengths = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    spring = 0.5 * cfg.stiffness * np.sum((lengths - cfg.rest_length) ** 2)
    grav = cfg.mass * cfg.gravity * np.sum(pos[1:, 1])
    return float(kinetic + spring + grav)


# ---------------------------------------------------------------- power grid

@dataclass
class GridConfig(_Config):
    n_nodes: int | None = None
    n_range: tuple = (100, 150)
    p: float = 0.15
    damping: float = 1.0
    coupling: float = 2.0
    restoring: float = 0.5
    v_ref: float = 1.0
    dt: float = 0.05
    generator_ratio_range: tuple = (0.2, 0.5)
    noise_std: float = 0.0
    u_max: float = 1.0
    init_spread: float = 0.1
    init_vdot_std: float = 0.0
    generator: list | None = None
    kind = "grid"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if min(self.damping, self.coupling, self.restoring) < 0:
            raise ValueError("damping, coupling and restoring must be non-negative")
        lo, hi = self.generator_ratio_range
        if not 0.2 <= lo <= hi <= 0.5:
            raise ValueError("generator ratio range must lie within [0.2, 0.5]")


@dataclass
class GridState:
    v: np.ndarray
    vdot: np.ndarray
    generator: np.ndarray

    @property
    def observation(self) -> np.ndarray:
        return np.stack([self.v, self.vdot], axis=1)


def grid_step(state: GridState, u, noise_std: float, cfg: GridConfig, g: Graph, rng,
              backend=None) -> GridState:
    """One semi-implicit Euler step.

    ``u`` holds either one entry per generator (in node order) or one entry per
    node, in which case load entries are ignored.
    """
    u = np.asarray(u, dtype=float).ravel()
    gen = np.asarray(state.generator, dtype=bool)
    if u.size == int(gen.sum()) and u.size != g.n:
        full = np.zeros(g.n)
        full[gen] = u
        u = full
    if u.size != g.n:
        raise ValueError("u must have one entry per generator or per node")
    u = u.reshape(1, g.n)
    if not (np.all(np.isfinite(state.v)) and np.all(np.isfinite(state.vdot))
            and np.all(np.isfinite(u))):
        raise FloatingPointError("non-finite grid state or action")
    w = rng.normal(0.0, 1.0, size=(1, g.n)) * noise_std
    out = kernels.grid_rollout(state.v, state.vdot, g.indptr, g.indices, u, w, state.generator,
                               cfg.damping, cfg.coupling, cfg.restoring, cfg.v_ref, cfg.dt,
                               backend=backend)
    return GridState(out[1, :, 0].copy(), out[1, :, 1].copy(), state.generator)


def laplacian(g: Graph) -> np.ndarray:
    adj = g.adjacency.astype(float)
    return np.diag(adj.sum(axis=1)) - adj


def grid_system_matrix(g: Graph, cfg: GridConfig) -> np.ndarray:
    """Continuous-time matrix of ``d/dt [V - V_ref, dV/dt]``."""
    n = g.n
    stiff = cfg.coupling * laplacian(g) + cfg.restoring * np.eye(n)
    top = np.hstack([np.zeros((n, n)), np.eye(n)])
    bottom = np.hstack([-stiff, -cfg.damping * np.eye(n)])
    return np.vstack([top, bottom])


def grid_step_matrix(g: Graph, cfg: GridConfig) -> np.ndarray:
    """Discrete transition of the semi-implicit Euler scheme around V_ref."""
    n = g.n
    stiff = cfg.coupling * laplacian(g) + cfg.restoring * np.eye(n)
    dt = cfg.dt
    vdot_row = np.hstack([-dt * stiff, (1 - dt * cfg.damping) * np.eye(n)])
    v_row = np.hstack([np.eye(n), np.zeros((n, n))]) + dt * vdot_row
    return np.vstack([v_row, vdot_row])


# ---------------------------------------------------------------- linear graph system

@dataclass
class LinearConfig(_Config):
    n_nodes: int = 5
    topology: str = "erdos_renyi"
    p: float = 0.5
    state_dim: int = 2
    action_dim: int = 1
    spectral_radius: float = 0.9
    noise_std: float = 0.01
    weights: str = "random"
    potential_kind: str = "gaussian"
    potential_scale: float = 1.0
    u_max: float = 1.0
    init_std: float = 1.0
    kind = "linear"


@dataclass
class LinearGraphSystem:
    """``x_i' = A sum_j w_ij x_j + B u_i + eps``.

    With ``potential`` set, the weights are Gibbs weights of the current
    states instead of the fixed ``weights`` matrix.
    """

    graph: Graph
    A: np.ndarray
    B: np.ndarray
    weights: np.ndarray | None = None
    potential: GibbsPotential | None = None
    noise_std: float = 0.0

    def __post_init__(self):
        if self.weights is None and self.potential is None:
            self.weights = uniform_weights(self.graph)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            mask = self.graph.adjacency.astype(bool) | np.eye(self.graph.n, dtype=bool)
            if np.any(w[~mask] != 0) or np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0):
                raise ValueError("weights must be a simplex over each inclusive neighborhood")
            self.weights = w

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]

    def mixing(self, x) -> np.ndarray:
        if self.potential is None:
            return self.weights
        return weight_matrix(self.graph, edge_weights(self.graph, x, self.potential))

    def transition_matrix(self) -> np.ndarray:
        """Global ``(N d) x (N d)`` transition for fixed weights."""
        return np.kron(self.weights, self.A)


def uniform_weights(g: Graph) -> np.ndarray:
    mask = (g.adjacency.astype(bool) | np.eye(g.n, dtype=bool)).astype(float)
    return mask / mask.sum(axis=1, keepdims=True)


def random_weights(g: Graph, rng, concentration: float = 1.0) -> np.ndarray:
    w = np.zeros((g.n, g.n))
    for i in range(g.n):
        nbrs = g.neighborhood(i)
        w[i, nbrs] = rng.dirichlet(np.full(len(nbrs), concentration))
    return w


def linear_graph_step(sys: LinearGraphSystem, x, u, rng=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    mixed = sys.mixing(x) @ x
    nxt = mixed @ sys.A.T + u @ sys.B.T
    if sys.noise_std > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise_std > 0")
        nxt = nxt + rng.normal(0.0, sys.noise_std, size=nxt.shape)
    return nxt


def linear_steady_state(sys: LinearGraphSystem, u, iterations: int = 2000,
                        tol: float = 1e-13) -> np.ndarray:
    """State held fixed by the constant action ``u`` (noise-free fixed point)."""
    x = np.zeros((sys.graph.n, sys.state_dim))
    for _ in range(iterations):
        nxt = linear_graph_step(replace(sys, noise_std=0.0), x, u)
        if np.max(np.abs(nxt - x)) <= tol * (1.0 + np.max(np.abs(nxt))):
            return nxt
        x = nxt
    raise FloatingPointError("no steady state: the fixed-point iteration did not converge")


def random_stable_matrix(dim: int, radius: float, rng) -> np.ndarray:
    m = rng.normal(size=(dim, dim))
    return m * (radius / max(np.abs(np.linalg.eigvals(m))))


def build_graph(topology: str, n: int, p: float, rng) -> Graph:
    if n == 1:
        return single_node_graph()
    if topology == "erdos_renyi":
        return generate_erdos_renyi(n, p, rng)
    if topology == "chain":
        return chain_graph(n)
    if topology == "ring":
        return ring_graph(n)
    if topology == "complete":
        return complete_graph(n)
    raise ValueError(f"unknown topology {topology!r}")


def make_linear_system(cfg: LinearConfig, seed, graph: Graph | None = None) -> LinearGraphSystem:
    g = graph if graph is not None else build_graph(cfg.topology, cfg.n_nodes, cfg.p,
                                                    derive_rng(seed, _GRAPH))
    rng = derive_rng(seed, _EXTRA)
    A = random_stable_matrix(cfg.state_dim, cfg.spectral_radius, rng)
    B = rng.normal(size=(cfg.state_dim, cfg.action_dim))
    if cfg.weights == "gibbs":
        pot = GibbsPotential(cfg.potential_kind, cfg.potential_scale)
        return LinearGraphSystem(g, A, B, potential=pot, noise_std=cfg.noise_std)
    if cfg.weights == "uniform":
        w = uniform_weights(g)
    elif cfg.weights == "random":
        w = random_weights(g, rng)
    else:
        raise ValueError(f"unknown weight mode {cfg.weights!r}")
    return LinearGraphSystem(g, A, B, weights=w, noise_std=cfg.noise_std)


# ---------------------------------------------------------------- environments

class Environment:
    """Stateful simulator; ``rollout`` advances it and returns new observations."""

    graph: Graph
    obs_dim: int
    action_dim: int
    actuated: np.ndarray
    u_max: float

    def reset(self, rng, obs=None) -> np.ndarray:
        raise NotImplementedError

    def rollout(self, actions) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> np.ndarray:
        return self.rollout(np.asarray(action, dtype=float)[None])[0]

    def random_actions(self, steps: int, rng) -> np.ndarray:
        a = rng.uniform(-self.u_max, self.u_max, size=(steps, self.graph.n, self.action_dim))
        return a * self.actuated[None, :, None]

    def config_json(self) -> dict:
        raise NotImplementedError

    def _check_actions(self, actions):
        actions = np.asarray(actions, dtype=float)
        if actions.ndim != 3 or actions.shape[1:] != (self.graph.n, self.action_dim):
            raise ValueError(f"actions must have shape (M, {self.graph.n}, {self.action_dim})")
        if not np.all(np.isfinite(actions)):
            raise FloatingPointError("non-finite actions")
        return actions


class RopeEnv(Environment):
    obs_dim, action_dim = 4, 1

    def __init__(self, cfg: RopeConfig, backend=None):
        self.cfg = cfg
        self.graph = rope_graph(cfg.n_masses, cfg.two_hop)
        self.actuated = np.zeros(cfg.n_masses, dtype=bool)
        self.actuated[0] = True
        self.u_max = cfg.u_max
        self.backend = backend
        self.obs = None

    def reset(self, rng, obs=None):
        if obs is None:
            c = self.cfg
            pos = rope_equilibrium(c, rng.uniform(-c.init_offset, c.init_offset))
            pos[1:, 0] += rng.normal(0.0, c.init_lateral_std, size=c.n_masses - 1)
            vel = rng.normal(0.0, c.init_vel_std, size=(c.n_masses, 2))
            vel[0, 1] = 0.0
            obs = np.concatenate([pos, vel], axis=1)
        self.obs = np.array(obs, dtype=float)
        return self.obs.copy()

    def rollout(self, actions):
        actions = self._check_actions(actions)
        c = self.cfg
        out = kernels.rope_rollout(self.obs[:, :2], self.obs[:, 2:], actions[:, 0, 0], c.mass,
                                   c.stiffness, c.rest_length, c.damping, c.gravity, c.dt,
                                   backend=self.backend)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("rope simulation diverged")
        self.obs = out[-1].copy()
        return out[1:]

    def config_json(self):
        return self.cfg.to_json()


class GridEnv(Environment):
    obs_dim, action_dim = 2, 1

    def __init__(self, cfg: GridConfig, graph: Graph, generator, backend=None):
        self.cfg = cfg
        self.graph = graph
        self.actuated = np.asarray(generator, dtype=bool)
        if self.actuated.shape != (graph.n,):
            raise ValueError("generator mask must have one entry per node")
        self.u_max = cfg.u_max
        self.backend = backend
        self.obs = None
        self.rng = None

    def reset(self, rng, obs=None):
        self.rng = rng
        if obs is None:
            c = self.cfg
            v = c.v_ref + rng.uniform(-c.init_spread, c.init_spread, size=self.graph.n)
            vd = rng.normal(0.0, 1.0, size=self.graph.n) * c.init_vdot_std
            obs = np.stack([v, vd], axis=1)
        self.obs = np.array(obs, dtype=float)
        return self.obs.copy()

    def rollout(self, actions):
        actions = self._check_actions(actions)
        c = self.cfg
        w = self.rng.normal(0.0, 1.0, size=actions.shape[:2]) * c.noise_std
        out = kernels.grid_rollout(self.obs[:, 0], self.obs[:, 1], self.graph.indptr,
                                   self.graph.indices, actions[:, :, 0], w, self.actuated,
                                   c.damping, c.coupling, c.restoring, c.v_ref, c.dt,
                                   backend=self.backend)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("grid simulation diverged")
        self.obs = out[-1].copy()
        return out[1:]

    def config_json(self):
        blob = self.cfg.to_json()
        blob["n_nodes"] = self.graph.n
        blob["generator"] = self.actuated.astype(int).tolist()
        return blob


class LinearGraphEnv(Environment):
    def __init__(self, cfg: LinearConfig, system: LinearGraphSystem, seed=None):
        self.cfg = cfg
        self.system = system
        self.seed = seed
        self.graph = system.graph
        self.obs_dim = system.state_dim
        self.action_dim = system.action_dim
        self.actuated = np.ones(self.graph.n, dtype=bool)
        self.u_max = cfg.u_max
        self.obs = None
        self.rng = None

    def reset(self, rng, obs=None):
        self.rng = rng
        if obs is None:
            obs = rng.normal(0.0, self.cfg.init_std, size=(self.graph.n, self.obs_dim))
        self.obs = np.array(obs, dtype=float)
        return self.obs.copy()

    def rollout(self, actions):
        actions = self._check_actions(actions)
        out = np.empty((actions.shape[0], self.graph.n, self.obs_dim))
        x = self.obs
        for t in range(actions.shape[0]):
            x = linear_graph_step(self.system, x, actions[t], self.rng)
            out[t] = x
        self.obs = x.copy()
        return out

    def config_json(self):
        blob = self.cfg.to_json()
        blob["system_seed"] = self.seed
        return blob


CONFIG_TYPES = {"rope": RopeConfig, "grid": GridConfig, "linear": LinearConfig}


def config_from_json(blob: dict):
    try:
        return CONFIG_TYPES[blob["kind"]].from_json(blob)
    except KeyError as exc:
        raise ValueError(f"unknown environment kind {blob.get('kind')!r}") from exc


def make_env(cfg, seed=None, graph: Graph | None = None, backend=None) -> Environment:
    """Instantiate an environment; random structure (graph, generators, operators)
    is drawn from ``seed`` unless already pinned by ``graph`` / the config."""
    if isinstance(cfg, dict):
        system_seed = cfg.get("system_seed")
        cfg = config_from_json(cfg)
    else:
        system_seed = None
    if isinstance(cfg, RopeConfig):
        return RopeEnv(cfg, backend=backend)
    if isinstance(cfg, GridConfig):
        rng = derive_rng(seed, _GRAPH)
        if graph is None:
            n = cfg.n_nodes or int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
            graph = generate_erdos_renyi(n, cfg.p, rng)
        if cfg.generator is not None:
            gen = np.asarray(cfg.generator, dtype=bool)
        else:
            rng = derive_rng(seed, _EXTRA)
            ratio = rng.uniform(*cfg.generator_ratio_range)
            count = min(max(1, int(round(ratio * graph.n))), graph.n)
            gen = np.zeros(graph.n, dtype=bool)
            gen[rng.choice(graph.n, count, replace=False)] = True
        return GridEnv(cfg, graph, gen, backend=backend)
    if isinstance(cfg, LinearConfig):
        seed = system_seed if system_seed is not None else seed
        return LinearGraphEnv(cfg, make_linear_system(cfg, seed, graph), seed)
    raise ValueError(f"unsupported configuration {cfg!r}")


def episode_rng(master_seed, index: int, stream: int = 0) -> np.random.Generator:
    """Stream of episode ``index``; ``stream`` separates e.g. training and test sets."""
    return derive_rng(master_seed, _EPISODE, stream, index)


def _episode(env_factory, policy, steps, master_seed, index, stream) -> Trajectory:
    env = env_factory()
    rng = episode_rng(master_seed, index, stream)
    obs0 = env.reset(rng)
    if policy == "random":
        actions = env.random_actions(steps, rng)
    elif policy == "zero":
        actions = np.zeros((steps, env.graph.n, env.action_dim))
    else:
        raise ValueError(f"unknown action policy {policy!r}")
    obs = env.rollout(actions)
    return Trajectory(np.concatenate([obs0[None], obs]), actions, seed=index,
                      graph_id=env.graph.fingerprint())


def generate_dataset(env_cfg, episodes: int, steps: int, action_policy: str = "random",
                     master_seed: int = 0, threads: int = 1, env: Environment | None = None,
                     backend=None, stream: int = 0) -> Dataset:
    """Simulate ``episodes`` trajectories of ``steps`` transitions each.

    Episode ``k`` draws its initial state, excitation and disturbances from a
    stream derived from ``(master_seed, stream, k)``, so the result does not
    depend on ``threads``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    template = env if env is not None else make_env(env_cfg, master_seed, backend=backend)
    blob = template.config_json()

    def factory():
        return make_env(blob, master_seed, graph=template.graph, backend=backend)

    jobs = range(episodes)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajs = list(pool.map(lambda k: _episode(factory, action_policy, steps,
                                                     master_seed, k, stream), jobs))
    else:
        trajs = [_episode(factory, action_policy, steps, master_seed, k, stream) for k in jobs]
    return Dataset(template.graph, trajs, blob, master_seed)


def inject_noise(ds: Dataset, fraction: float, seed) -> Dataset:
    """Add Gaussian observation noise with per-coordinate std ``fraction * std``.

    The reference std is taken per observation coordinate over every node,
    step and trajectory of the clean dataset. Actions are left untouched.
    """
    if fraction < 0:
        raise ValueError("noise fraction must be non-negative")
    if fraction == 0:
        return Dataset(ds.graph, [Trajectory(t.observations.copy(), t.actions.copy(), t.seed,
                                             t.graph_id) for t in ds.trajectories],
                       dict(ds.env_config), ds.master_seed)
    pooled = np.concatenate([t.observations.reshape(-1, ds.obs_dim) for t in ds.trajectories])
    std = pooled.std(axis=0) * fraction
    trajs = []
    for k, t in enumerate(ds.trajectories):
        rng = derive_rng(seed, _NOISE, k)
        noisy = t.observations + rng.normal(size=t.observations.shape) * std
        trajs.append(Trajectory(noisy, t.actions.copy(), t.seed, t.graph_id))
    cfg = dict(ds.env_config)
    cfg["observation_noise"] = fraction
    return Dataset(ds.graph, trajs, cfg, ds.master_seed)
