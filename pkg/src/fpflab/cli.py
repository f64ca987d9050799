"""Experiment runner: reproducible commands over config files, CSV outputs.

Subcommands: validate, trajectory, mse-time, mse-n, poc.  One YAML config
file per experiment; flags override config fields; the FPFLAB_OUT
environment variable overrides the configured output directory.  Exit codes:
0 success, 1 domain failure (validation or acceptance), 2 usage/config error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .analysis import (
    f_const,
    f_tanh,
    mse_vs_N,
    mse_vs_time,
    poc_sweep,
    write_mse_n_csv,
    write_mse_time_csv,
    write_poc_csv,
    write_trajectory_csv,
)
from .fpf import OMEGA_MODES, VARIANTS, run_fpf
from .kalman import run_kalman
from .model import LinearGaussianModel, RngStream, simulate_truth, validate_model

__all__ = ["main", "load_config", "ExperimentConfig", "RunConfig", "ConfigError"]

POC_FUNCTIONS = {"tanh": f_tanh, "const": f_const}


class ConfigError(Exception):
    """Unreadable or ill-formed configuration (exit code 2)."""


class DomainError(Exception):
    """Well-formed input that fails a domain check (exit code 1)."""


@dataclass
class RunConfig:
    variant: str = "deterministic"
    omega_mode: str = "zero"
    N: int = 100
    M: int = 1000
    dt: float = 1e-3
    T: float = 2.0
    t_star: float = 2.0
    N_list: list[int] = field(default_factory=lambda: [10, 32, 100, 316, 1000])
    seed: int = 0
    output_dir: str = "."
    workers: int = 1
    f: str = "tanh"


@dataclass
class ExperimentConfig:
    model: LinearGaussianModel
    run: RunConfig


_MODEL_FIELDS = ("A", "C", "sigma_B", "m0", "Sigma0")


def load_config(path) -> ExperimentConfig:
    """Parse and validate a YAML experiment config.

    The model block holds A, C, sigma_B (row-major nested arrays or scalars),
    m0 and Sigma0; the run block holds the experiment fields.  For
    convenience dt/T/seed may live at either level.  Every referenced field
    is validated before any computation.
    """
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"ill-formed YAML in {path}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")

    model_block = raw.get("model", {})
    if not isinstance(model_block, dict):
        raise ConfigError("'model' must be a mapping")
    missing = [k for k in _MODEL_FIELDS if k not in model_block]
    if missing:
        raise ConfigError(f"config missing model field(s): {', '.join(missing)}")
    try:
        model = LinearGaussianModel(
            A=model_block["A"], C=model_block["C"], sigma_B=model_block["sigma_B"],
            m0=model_block["m0"], Sigma0=model_block["Sigma0"],
            allow_singular_prior=bool(model_block.get("allow_singular_prior", False)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid model block: {exc}")

    run_block = dict(raw.get("run", {}) or {})
    # dt / T / seed are accepted at top level or inside the model block too.
    for key in ("dt", "T", "seed"):
        for source in (raw, model_block):
            if key in source and key not in run_block:
                run_block[key] = source[key]
    run = RunConfig()
    valid = {f.name for f in fields(RunConfig)}
    for key, value in run_block.items():
        if key not in valid:
            raise ConfigError(f"unknown run field '{key}'")
        setattr(run, key, value)
    _check_run(run)
    return ExperimentConfig(model=model, run=run)


def _check_run(run: RunConfig) -> None:
    if run.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got '{run.variant}'")
    if run.omega_mode not in OMEGA_MODES:
        raise ConfigError(f"omega_mode must be one of {OMEGA_MODES}, got '{run.omega_mode}'")
    if run.f not in POC_FUNCTIONS:
        raise ConfigError(f"f must be one of {sorted(POC_FUNCTIONS)}, got '{run.f}'")
    for name in ("N", "M"):
        value = getattr(run, name)
        if not isinstance(value, int) or value < 2:
            raise ConfigError(f"{name} must be an integer >= 2, got {value!r}")
    for name in ("dt", "T", "t_star"):
        value = getattr(run, name)
        if not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError(f"{name} must be positive, got {value!r}")
    if (not isinstance(run.N_list, (list, tuple)) or len(run.N_list) < 2
            or any((not isinstance(n, int)) or n < 2 for n in run.N_list)
            or any(b <= a for a, b in zip(run.N_list, run.N_list[1:]))):
        raise ConfigError(f"N_list must be a strictly increasing list of integers >= 2, got {run.N_list!r}")
    run.seed = int(run.seed)
    run.workers = int(run.workers)


def _resolved_dict(cfg: ExperimentConfig) -> dict:
    return {
        "model": {
            "A": cfg.model.A.tolist(), "C": cfg.model.C.tolist(),
            "sigma_B": cfg.model.sigma_B.tolist(), "m0": cfg.model.m0.tolist(),
            "Sigma0": cfg.model.Sigma0.tolist(),
            "allow_singular_prior": cfg.model.allow_singular_prior,
        },
        "run": {f.name: getattr(cfg.run, f.name) for f in fields(RunConfig)},
    }


def _print_resolved(cfg: ExperimentConfig) -> None:
    print("resolved config:")
    print(yaml.safe_dump(_resolved_dict(cfg), sort_keys=False).rstrip())


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(cfg: ExperimentConfig) -> int:
    _print_resolved(cfg)
    report = validate_model(cfg.model)
    print("validation report:")
    print(str(report))
    if not report.passed:
        raise DomainError("; ".join(f"{c.name}: {c.detail}" for c in report.failures()))
    return 0


def cmd_trajectory(cfg: ExperimentConfig) -> int:
    _print_resolved(cfg)
    run = cfg.run
    stream = RngStream(run.seed)
    obs = simulate_truth(cfg.model, run.dt, run.T, stream)
    kal = run_kalman(cfg.model, obs)
    fpf = run_fpf(cfg.model, obs, run.N, run.variant, stream,
                  omega_mode=run.omega_mode, record_particles=True)
    path = _out_dir(cfg) / "trajectory.csv"
    write_trajectory_csv(fpf, kal, path, run.seed)
    print(f"wrote {path} ({obs.steps * run.N} rows)")
    return 0


def _print_fit(label: str, fit) -> None:
    if fit is None:
        print(f"{label}: n/a")
    else:
        print(f"{label}: {fit.value:+.4f} +/- {fit.half_width:.4f}")


def cmd_mse_time(cfg: ExperimentConfig) -> int:
    _print_resolved(cfg)
    run = cfg.run
    report = mse_vs_time(cfg.model, run.N, run.M, run.dt, run.T, run.variant,
                         RngStream(run.seed), omega_mode=run.omega_mode,
                         workers=run.workers)
    path = _out_dir(cfg) / "mse_time.csv"
    write_mse_time_csv(report, path, run.seed)
    _print_fit("fitted exponential rate (mse of mean)", report.fit_mean)
    _print_fit("fitted exponential rate (mse of cov)", report.fit_cov)
    print(f"wrote {path}")
    return 0


def cmd_mse_n(cfg: ExperimentConfig) -> int:
    _print_resolved(cfg)
    run = cfg.run
    report = mse_vs_N(cfg.model, run.N_list, run.t_star, run.M, run.dt,
                      run.variant, RngStream(run.seed),
                      omega_mode=run.omega_mode, workers=run.workers)
    path = _out_dir(cfg) / "mse_n.csv"
    write_mse_n_csv(report, path, run.seed)
    _print_fit("fitted log-log slope (mse of mean)", report.fit_mean)
    _print_fit("fitted log-log slope (mse of cov)", report.fit_cov)
    print(f"wrote {path}")
    return 0


def cmd_poc(cfg: ExperimentConfig) -> int:
    _print_resolved(cfg)
    run = cfg.run
    report = poc_sweep(cfg.model, run.N_list, run.t_star, run.M,
                       RngStream(run.seed), f=POC_FUNCTIONS[run.f], dt=run.dt,
                       omega_mode=run.omega_mode, workers=run.workers)
    path = _out_dir(cfg) / "poc.csv"
    write_poc_csv(report, path, run.seed)
    _print_fit("fitted log-log slope (coupling mse)", report.fit_coupling)
    _print_fit("fitted log-log slope (weak statistic)", report.fit_weak)
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "validate": cmd_validate,
    "trajectory": cmd_trajectory,
    "mse-time": cmd_mse_time,
    "mse-n": cmd_mse_n,
    "poc": cmd_poc,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpflab",
        description="Linear-Gaussian filtering laboratory experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--workers", type=int, default=None,
                       help="replica worker processes (default from config)")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--N", type=int, default=None)
        p.add_argument("--M", type=int, default=None)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--T", type=float, default=None)
        p.add_argument("--t-star", type=float, default=None, dest="t_star")
        p.add_argument("--variant", choices=VARIANTS, default=None)
        p.add_argument("--omega", choices=OMEGA_MODES, default=None, dest="omega_mode")
        p.add_argument("--f", choices=sorted(POC_FUNCTIONS), default=None)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    for name in ("seed", "workers", "N", "M", "dt", "T", "t_star",
                 "variant", "omega_mode", "f"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.run, name, value)
    # Precedence for the output directory: flag > environment > config.
    env_out = os.environ.get("FPFLAB_OUT")
    if args.out is not None:
        cfg.run.output_dir = args.out
    elif env_out:
        cfg.run.output_dir = env_out
    _check_run(cfg.run)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"domain failure: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
