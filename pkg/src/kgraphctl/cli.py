"""``kgraphctl`` command line: generate, fit, eval-predict, control, sweep.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure. ``KGRAPHCTL_THREADS`` overrides the worker-thread count.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiments as ex
from .graph import load_dataset, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "KGRAPHCTL_THREADS"

_SKIP = {"features", "env", "preset"}
_FEATURE_PREFIX = "feature_"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _optional(kind):
    def parse(text):
        if text.lower() in ("none", "null"):
            return None
        return kind(text)
    return parse


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


_TYPES = {"int": int, "float": float, "str": str, "bool": _bool,
          "float | None": _optional(float), "int | None": _optional(int)}


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    p.add_argument("--preset", choices=sorted(ex.PRESETS))
    p.add_argument("--env-json", help="JSON object overriding environment parameters")
    for f in fields(ex.ExperimentConfig):
        if f.name in _SKIP:
            continue
        flag = "--" + ("seed" if f.name == "master_seed" else f.name.replace("_", "-"))
        p.add_argument(flag, dest=f.name, type=_TYPES[str(f.type)], default=None)
    for f in fields(ex.FeatureConfig):
        p.add_argument("--feature-" + f.name.replace("_", "-"), dest=_FEATURE_PREFIX + f.name,
                       type=_TYPES[str(f.type)], default=None)


def build_config(args) -> ex.ExperimentConfig:
    blob = {}
    if args.config:
        try:
            blob = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ex.ConfigError(f"invalid JSON in {args.config}: {exc}") from exc
        if not isinstance(blob, dict):
            raise ex.ConfigError("the config file must contain a JSON object")
    if args.preset:
        blob["preset"] = args.preset
    if args.env_json:
        env = json.loads(args.env_json)
        blob["env"] = {**blob.get("env", {}), **env}
    feats = dict(blob.get("features", {}))
    for key, value in vars(args).items():
        if value is None:
            continue
        if key.startswith(_FEATURE_PREFIX):
            feats[key[len(_FEATURE_PREFIX):]] = value
        elif key in {f.name for f in fields(ex.ExperimentConfig)} and key not in _SKIP:
            blob[key] = value
    if feats:
        blob["features"] = feats
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            blob["threads"] = int(threads)
        except ValueError as exc:
            raise ex.ConfigError(f"{THREADS_ENV} must be an integer") from exc
    try:
        return ex.ExperimentConfig.from_json(blob)
    except TypeError as exc:
        raise ex.ConfigError(str(exc)) from exc


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dataset_dir(args, cfg) -> Path:
    return Path(args.dataset) if getattr(args, "dataset", None) else Path(cfg.out) / "dataset"


def _model_dir(args, cfg) -> Path:
    return Path(args.model) if getattr(args, "model", None) else Path(cfg.out) / "model"


def _load(path: Path):
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {path}")
    return load_dataset(path)


def cmd_generate(cfg: ex.ExperimentConfig, args) -> dict:
    ds = ex.generate(cfg)
    target = _dataset_dir(args, cfg)
    checksum = save_dataset(ds, target)
    return {"dataset": str(target), "checksum": checksum, "nodes": ds.graph.n,
            "trajectories": len(ds.trajectories)}


def cmd_fit(cfg: ex.ExperimentConfig, args) -> dict:
    src = _dataset_dir(args, cfg)
    ds = _load(src)
    pipe = ex.fit_pipeline(cfg, ds)
    manifest = (src / "manifest.json").read_bytes()
    checksum = ex.save_pipeline(pipe, _model_dir(args, cfg), cfg,
                                hashlib.sha256(manifest).hexdigest())
    report = dict(pipe.report)
    report["checksum"] = checksum
    _write(Path(cfg.out) / "fit_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_eval_predict(cfg: ex.ExperimentConfig, args) -> dict:
    pipe, _ = ex.load_pipeline(_model_dir(args, cfg))
    if args.test_dataset:
        test = _load(Path(args.test_dataset))
    else:
        test = ex.test_set(cfg, _load(_dataset_dir(args, cfg)))
    curves = ex.evaluate_prediction(cfg, pipe, test)
    text = ex.csv_text(["step", "nrmse_mean", "nrmse_std"], ex.predict_rows(curves), cfg,
                       "eval-predict")
    path = Path(cfg.out) / "predict.csv"
    _write(path, text)
    return {"csv": str(path), "nrmse_step1": float(curves[:, 0].mean()),
            "nrmse_final": float(curves[:, -1].mean())}


def cmd_control(cfg: ex.ExperimentConfig, args) -> dict:
    pipe, _ = ex.load_pipeline(_model_dir(args, cfg))
    ds = _load(_dataset_dir(args, cfg))
    outcomes = ex.run_control(cfg, pipe, ds)
    text = ex.csv_text(["episode", "cost", "error"], ex.control_rows(outcomes), cfg, "control")
    path = Path(cfg.out) / "control.csv"
    _write(path, text)
    err = np.array([o["error"] for o in outcomes])
    return {"csv": str(path), "episodes": len(outcomes), "error_mean": float(err.mean())}


def cmd_sweep(cfg: ex.ExperimentConfig, args) -> dict:
    values = None
    if args.values:
        kind = str if args.axis == "form" else float
        values = [kind(v) for v in args.values.split(",")]
        if args.axis in ("fitting_number", "feature_dim"):
            values = [int(v) for v in values]
    forms = args.forms.split(",") if args.forms else None
    rows = ex.sweep(cfg, args.axis, values, forms)
    text = ex.csv_text(["axis_value", "form", "metric", "mean", "std"], rows, cfg,
                       f"sweep:{args.axis}")
    path = Path(cfg.out) / f"sweep_{args.axis}.csv"
    _write(path, text)
    return {"csv": str(path), "cells": len(rows)}


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "eval-predict": cmd_eval_predict,
            "control": cmd_control, "sweep": cmd_sweep}


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgraphctl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name != "generate":
            p.add_argument("--dataset", help="dataset directory (default: <out>/dataset)")
        else:
            p.add_argument("--dataset", help="output dataset directory (default: <out>/dataset)")
        if name in ("eval-predict", "control", "fit"):
            p.add_argument("--model", help="model directory (default: <out>/model)")
        if name == "eval-predict":
            p.add_argument("--test-dataset", help="held-out dataset (default: generated)")
        if name == "sweep":
            p.add_argument("--axis", required=True, help="|".join(ex.SWEEP_AXES))
            p.add_argument("--values", help="comma-separated axis values")
            p.add_argument("--forms", help="comma-separated embedding forms")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        with threadpool_limits(limits=1):
            summary = COMMANDS[args.command](cfg, args)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
