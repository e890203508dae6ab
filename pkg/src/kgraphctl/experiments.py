"""End-to-end pipeline: data generation, identification, evaluation, control, sweeps.

Everything here is deterministic given :attr:`ExperimentConfig.master_seed`;
random streams are derived from the seed plus fixed stream identifiers and
episode indices, and every reduction runs in episode order, so results do
not depend on the number of worker threads.
"""
from __future__ import annotations

import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .control import (ControlProblem, control_error, free_response, receding_horizon_control)
from .embedding import (FitConfig, EmbeddingModel, accumulate_moments, encode_dataset, fit,
                        load_model, prediction_nrmse, save_model)
from .features import (ActionProjection, Decoder, FeatureMap, encode_graph, fit_decoder,
                       identity_map, make_action_projection, map_inputs, median_bandwidth,
                       polynomial_map, sample_rff_map)
from .graph import Dataset, load_dataset
from .mean_field import GibbsPotential
from .simulators import (GridConfig, LinearConfig, RopeConfig, config_from_json, derive_rng,
                         episode_rng, generate_dataset, inject_noise, linear_steady_state, make_env,
                         rope_equilibrium)

TRAIN_STREAM, TEST_STREAM, CONTROL_STREAM = 0, 1, 2
_TARGET = 71

SWEEP_AXES = {
    "fitting_number": [1, 4, 8, 16, 32],
    "noise": [0.0, 0.02, 0.05, 0.10, 0.20],
    "bandwidth": [0.1, 0.5, 1, 2, 3, 4, 5, 10],
    "feature_dim": [8, 16, 32, 64],
    "form": ["tensor", "dense", "hom", "hom_mean"],
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class FeatureConfig:
    """``bandwidth=None`` selects the median heuristic on the training inputs."""

    kind: str = "rff"
    dim: int = 64
    bandwidth: float | None = None
    degree: int = 2
    augment: bool = True
    seed: int | None = None
    action_feature_dim: int | None = None


PRESETS = {
    "rope": {"env": {"kind": "rope"}, "horizon": 40, "feedback_step": None,
             "eval_episodes": 200, "ridge_scale": 1e-4,
             "features": {"kind": "rff", "dim": 64, "augment": True}},
    "grid": {"env": {"kind": "grid"}, "horizon": 100, "feedback_step": 50, "eval_episodes": 50,
             "features": {"kind": "polynomial", "degree": 1, "augment": False}},
    "linear": {"env": {"kind": "linear"}, "horizon": 40, "feedback_step": None,
               "eval_episodes": 20, "form": "dense",
               "features": {"kind": "identity", "augment": False}},
}


@dataclass
class ExperimentConfig:
    preset: str = "rope"
    env: dict = field(default_factory=dict)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    form: str = "hom_mean"
    estimator: str = "joint"
    potential: str = "gaussian"
    potential_scale: float = 2.0
    ridge: float | None = None
    ridge_scale: float = 1e-6
    decoder_rho: float = 1e-8
    episodes: int = 32
    steps: int = 100
    fitting_number: int = 32
    noise: float = 0.0
    test_episodes: int = 10
    eval_horizon: int = 100
    horizon: int = 40
    feedback_step: int | None = None
    eval_episodes: int = 200
    q1: float = 1.0
    q2: float = 1e-3
    target_offset: float = 0.2
    sweep_seeds: int = 5
    master_seed: int = 0
    threads: int = 1
    out: str = "results"

    def __post_init__(self):
        if isinstance(self.features, dict):
            self.features = FeatureConfig(**self.features)
        self.validate()

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        for name in ("episodes", "steps", "fitting_number", "test_episodes", "eval_horizon",
                     "horizon", "eval_episodes", "sweep_seeds", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.feedback_step is not None and not 0 < self.feedback_step <= self.horizon:
            raise ConfigError("feedback_step must lie in (0, horizon]")
        if self.features.kind not in ("rff", "polynomial", "identity"):
            raise ConfigError(f"unknown feature kind {self.features.kind!r}")
        try:
            self.fit_config()
            config_from_json(self.env_config())
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "ExperimentConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        base = PRESETS[preset]
        feats = dict(base["features"])
        given = overrides.pop("features", None) or {}
        feats.update(asdict(given) if isinstance(given, FeatureConfig) else given)
        env = dict(base["env"])
        env.update(overrides.pop("env", {}) or {})
        kwargs = {"preset": preset, "env": env, "features": FeatureConfig(**feats),
                  "horizon": base["horizon"], "feedback_step": base["feedback_step"],
                  "eval_episodes": base["eval_episodes"]}
        for key in ("form", "ridge_scale"):
            if key in base:
                kwargs[key] = base[key]
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, blob: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(blob) - names
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        blob = dict(blob)
        preset = blob.pop("preset", "rope")
        return cls.from_preset(preset, **blob)

    def to_json(self) -> dict:
        return asdict(self)

    def env_config(self) -> dict:
        blob = dict(PRESETS[self.preset]["env"])
        blob.update(self.env)
        return blob

    def fit_config(self) -> FitConfig:
        return FitConfig(form=self.form, ridge=self.ridge, ridge_scale=self.ridge_scale,
                         potential=GibbsPotential(self.potential, self.potential_scale),
                         estimator=self.estimator)

    def config_hash(self) -> str:
        """Hash of everything that can influence results (not paths or threads)."""
        blob = self.to_json()
        blob.pop("out", None)
        blob.pop("threads", None)
        text = json.dumps(blob, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- CSV output

def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(header, rows, cfg: ExperimentConfig, command: str) -> str:
    """CSV body preceded by a ``#`` metadata line (version, command, config hash)."""
    buf = io.StringIO()
    buf.write(f"# kgraphctl {__version__} command={command} config={cfg.config_hash()}\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(format_value(v) for v in row) + "\n")
    return buf.getvalue()


def read_csv(path):
    """Rows of a results CSV as dicts of strings (metadata line skipped)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


# ---------------------------------------------------------------- pipeline pieces

def _map_threads(fn, items, threads):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def build_env(cfg: ExperimentConfig, seed=None):
    return make_env(cfg.env_config(), cfg.master_seed if seed is None else seed)


def generate(cfg: ExperimentConfig, seed=None, episodes=None, stream=TRAIN_STREAM,
             env=None) -> Dataset:
    seed = cfg.master_seed if seed is None else seed
    env = env if env is not None else build_env(cfg, seed)
    ds = generate_dataset(None, episodes or cfg.episodes, cfg.steps, "random", seed,
                          threads=cfg.threads, env=env, stream=stream)
    ds.env_config["connected"] = bool(ds.graph.is_connected())
    return ds


def test_set(cfg: ExperimentConfig, train: Dataset) -> Dataset:
    env = make_env(train.env_config, train.master_seed, graph=train.graph)
    ds = generate_dataset(None, cfg.test_episodes, max(cfg.steps, cfg.eval_horizon), "random",
                          train.master_seed, threads=cfg.threads, env=env, stream=TEST_STREAM)
    ds.env_config["connected"] = bool(ds.graph.is_connected())
    return ds


def make_feature_map(fc: FeatureConfig, ds: Dataset, seed) -> FeatureMap:
    d_o = ds.obs_dim
    if fc.kind == "identity":
        return identity_map(d_o, fc.augment)
    if fc.kind == "polynomial":
        return polynomial_map(d_o, fc.degree, fc.augment)
    gamma = fc.bandwidth
    if gamma is None:
        probe = identity_map(d_o, fc.augment)
        raw = np.concatenate([map_inputs(probe, ds.graph, t.observations)
                              for t in ds.trajectories])
        gamma = median_bandwidth(raw.reshape(-1, probe.raw_dim), seed=seed)
    return sample_rff_map(d_o, fc.dim, gamma, fc.seed if fc.seed is not None else seed,
                          fc.augment)


@dataclass
class Pipeline:
    """Everything needed to predict with and control through a fitted model."""

    model: EmbeddingModel
    fmap: FeatureMap
    proj: ActionProjection
    decoder: Decoder
    report: dict = field(default_factory=dict)


def training_data(cfg: ExperimentConfig, ds: Dataset) -> Dataset:
    """First ``fitting_number`` trajectories, with observation noise if configured."""
    if cfg.fitting_number > len(ds.trajectories):
        raise ConfigError("fitting_number exceeds the trajectories in the dataset")
    sub = ds.subset(cfg.fitting_number)
    return inject_noise(sub, cfg.noise, cfg.master_seed) if cfg.noise > 0 else sub


def fit_pipeline(cfg: ExperimentConfig, ds: Dataset) -> Pipeline:
    train = training_data(cfg, ds)
    fmap = make_feature_map(cfg.features, train, cfg.master_seed)
    proj = make_action_projection(train.action_dim, cfg.features.action_feature_dim,
                                  seed=cfg.master_seed)
    data = encode_dataset(train, fmap, proj)
    model = fit(data, train.graph, cfg.fit_config())
    obs = np.concatenate([t.observations for t in train.trajectories])
    decoder = fit_decoder(encode_graph(fmap, train.graph, obs), obs, cfg.decoder_rho)
    mom = accumulate_moments(data, train.graph)
    report = dict(model.report)
    report["max_history_condition"] = float(max(np.linalg.cond(c) for c in mom.cov_hh))
    report["max_action_condition"] = float(max(np.linalg.cond(c) for c in mom.cov_aa))
    report["ridge"] = model.ridge
    report["samples"] = data.samples
    return Pipeline(model, fmap, proj, decoder, report)


def save_pipeline(p: Pipeline, directory, cfg: ExperimentConfig, dataset_checksum="") -> str:
    extra = {"feature_map": p.fmap.to_json(), "decoder_rho": p.decoder.rho,
             "config": cfg.to_json(), "dataset": dataset_checksum, "fit_report": p.report,
             "version": __version__}
    return save_model(p.model, directory, extra=extra,
                      arrays={"projection": p.proj.P, "decoder": p.decoder.D})


def load_pipeline(directory) -> tuple[Pipeline, dict]:
    model, extra = load_model(directory)
    arrays = extra.pop("arrays")
    try:
        fmap = FeatureMap.from_json(extra["feature_map"])
        proj = ActionProjection(arrays["projection"])
        decoder = Decoder(arrays["decoder"], extra.get("decoder_rho", 0.0))
    except KeyError as exc:
        raise ValueError(f"model bundle is missing {exc}") from exc
    return Pipeline(model, fmap, proj, decoder, extra.get("fit_report", {})), extra


def evaluate_prediction(cfg: ExperimentConfig, p: Pipeline, test: Dataset) -> np.ndarray:
    """Per-trajectory NRMSE curves ``(n_test, eval_horizon)``."""
    return prediction_nrmse(p.model, test.graph, p.fmap, p.proj, p.decoder, test.trajectories,
                            cfg.eval_horizon, per_trajectory=True)


def predict_rows(curves: np.ndarray):
    mean, std = curves.mean(axis=0), curves.std(axis=0)
    return [(t + 1, mean[t], std[t]) for t in range(curves.shape[1])]


# ---------------------------------------------------------------- control

def control_target(cfg: ExperimentConfig, env, rng) -> np.ndarray:
    """Target observation for one control episode."""
    c = env.cfg
    if isinstance(c, RopeConfig):
        pos = rope_equilibrium(c, rng.uniform(-cfg.target_offset, cfg.target_offset))
        return np.concatenate([pos, np.zeros_like(pos)], axis=1)
    if isinstance(c, GridConfig):
        return np.tile([c.v_ref, 0.0], (env.graph.n, 1))
    if isinstance(c, LinearConfig):
        return linear_steady_state(env.system, rng.normal(0.0, c.u_max, size=(env.graph.n,
                                                                             env.action_dim)))
    raise ConfigError("no control protocol for this environment")


def control_problem(cfg: ExperimentConfig, p: Pipeline, env, target_obs) -> ControlProblem:
    target = encode_graph(p.fmap, env.graph, target_obs)
    return ControlProblem(cfg.horizon, target, cfg.q1 * np.eye(p.model.dim),
                          cfg.q2 * np.eye(p.model.action_dim), cfg.feedback_step,
                          actuated=env.actuated)


def control_episode(cfg: ExperimentConfig, p: Pipeline, env_blob: dict, graph, seed,
                    index: int) -> dict:
    env = make_env(env_blob, seed, graph=graph)
    rng = episode_rng(seed, index, CONTROL_STREAM)
    env.reset(rng)
    start = np.array(env.obs)
    target_obs = control_target(cfg, env, derive_rng(seed, _TARGET, index))
    problem = control_problem(cfg, p, env, target_obs)
    result = receding_horizon_control(env, p.model, p.fmap, p.proj, p.decoder, problem,
                                      target_obs)
    env.reset(rng, start)
    free = free_response(env, cfg.horizon)
    return {"episode": index, "cost": result.cost, "error": result.error,
            "free_error": control_error(free[-1], target_obs), "result": result,
            "target": target_obs}


def run_control(cfg: ExperimentConfig, p: Pipeline, ds: Dataset, episodes=None) -> list:
    blob, graph, seed = ds.env_config, ds.graph, ds.master_seed
    p.model.check_graph(graph)
    count = episodes or cfg.eval_episodes
    return _map_threads(lambda k: control_episode(cfg, p, blob, graph, seed, k), range(count),
                        cfg.threads)


def control_rows(outcomes: list):
    rows = [(o["episode"], o["cost"], o["error"]) for o in outcomes]
    cost = np.array([o["cost"] for o in outcomes])
    err = np.array([o["error"] for o in outcomes])
    rows.append(("summary", f"{format_value(cost.mean())}±{format_value(cost.std())}",
                 f"{format_value(err.mean())}±{format_value(err.std())}"))
    return rows


# ---------------------------------------------------------------- sweeps

def _cell_config(cfg: ExperimentConfig, axis: str, value, form: str, seed: int):
    feats = replace(cfg.features)
    over = {"form": form, "master_seed": seed}
    if axis == "fitting_number":
        over["fitting_number"] = int(value)
    elif axis == "noise":
        over["noise"] = float(value)
    elif axis == "bandwidth":
        feats = replace(feats, bandwidth=float(value))
    elif axis == "feature_dim":
        feats = replace(feats, dim=int(value))
    elif axis == "form":
        over["form"] = value
    return replace(cfg, features=feats, **over)


def sweep(cfg: ExperimentConfig, axis: str, values=None, forms=None,
          metrics=("nrmse_step1", "nrmse_final")):
    """Long-format rows ``(axis_value, form, metric, mean, std)``.

    Every cell with the same seed consumes the same training and test
    datasets, so differences between cells are paired comparisons.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    if axis in ("bandwidth", "feature_dim") and cfg.features.kind != "rff":
        raise ConfigError(f"the {axis} axis needs random Fourier features")
    values = list(values if values is not None else SWEEP_AXES[axis])
    if axis == "form":
        forms = [None]
    forms = list(forms or ["dense", "hom", "hom_mean"])
    seeds = [cfg.master_seed + k for k in range(cfg.sweep_seeds)]
    episodes = max(cfg.episodes, max(values) if axis == "fitting_number" else 0)
    base = replace(cfg, episodes=episodes)

    def per_seed(seed):
        scfg = replace(base, master_seed=seed)
        train = generate(scfg)
        test = test_set(scfg, train)
        out = {}
        for value in values:
            for form in forms:
                ccfg = _cell_config(scfg, axis, value, form or value, seed)
                curves = evaluate_prediction(ccfg, fit_pipeline(ccfg, train), test)
                pooled = np.sqrt(np.mean(curves ** 2, axis=0))
                out[(value, form or value)] = {"nrmse_step1": pooled[0],
                                               "nrmse_final": pooled[-1]}
        return out

    results = _map_threads(per_seed, seeds, cfg.threads)
    rows = []
    for value in values:
        for form in forms:
            key = (value, form or value)
            for metric in metrics:
                vals = np.array([r[key][metric] for r in results])
                rows.append((value, key[1], metric, vals.mean(), vals.std()))
    return rows
