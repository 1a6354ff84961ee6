"""Configuration-driven experiment runner.

Usage::

    cble-lab <kind> --config experiment.yaml [--workers N] [--out DIR]
    cble-lab run --config configs/   # every *.yaml / *.yml / *.json file

Exit codes: 0 success, 2 configuration error, 3 precondition violation,
4 numerical failure. Failures also write ``error.json`` into the output
directory and print the same record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
import traceback
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .branching_core import (
    BranchingMechanism,
    ContractViolation,
    DegenerateMechanismError,
    LimitFailure,
    SolverFailure,
    mechanism_from_config,
)
from .env_model import EnvironmentSpec, MomentDomainError, UnsupportedTiltError, classify_regime, laplace_exponent_derivatives, spec_from_config
from .estimators import (
    Estimate,
    InsufficientPathsError,
    LambdaQuadrature,
    PreconditionError,
    TruncationError,
    estimate_B1_general,
    estimate_B1_stable,
    estimate_ladder_renewal,
    intermediate_constant_probe,
    qprocess_laplace_check,
    rate_regression,
    reflected_sup_curve,
    survival_curve_is,
    survival_curve_quenched,
    survival_mc_direct,
)
from .forward_sde import simulate_cble
from .path_sim import path_to_csv, sample_env_path

RESULT_SCHEMA = "cble-lab/result/v1"
MANIFEST_SCHEMA = "cble-lab/manifest/v1"
ERROR_SCHEMA = "cble-lab/error/v1"
WORKERS_ENV = "CBLE_LAB_WORKERS"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_NUMERICAL = 4

KINDS = ("classify", "survival", "rate", "b1", "fluctuation", "qprocess", "intermediate-probe")

# Allowed parameters and defaults per experiment kind. ``None`` marks a required key.
PARAMS: dict[str, dict] = {
    "classify": {"tolerance": 1e-9},
    "survival": {"route": "quenched", "t": None, "z0": 1.0, "n": None, "dt": 1e-3, "dt_max": 1e-3, "method": "auto"},
    "rate": {"route": "esscher", "t_grid": None, "z0": 1.0, "n": None, "dt_max": 1e-2, "method": "auto", "max_rel_err": 0.2},
    "b1": {
        "route": "both",
        "T_trunc": None,
        "n": None,
        "n_general": None,
        "dt_max": 1e-2,
        "dt_max_general": 5e-2,
        "lambda_quad": {"u_min": -8.0, "u_max": 16.0, "du": 1.0},
        "tol": 0.01,
    },
    "fluctuation": {
        "x": None,
        "t_grid": None,
        "n": None,
        "dt_max": 1e-3,
        "x_grid": None,
        "ladder_n": 20000,
        "skel_dt": 1e-2,
        "max_steps": 100000,
    },
    "qprocess": {"t": None, "lam": None, "z0": 1.0, "n": None, "dt": 1e-3, "dt_max": 1e-3},
    "intermediate-probe": {
        "t_grid": None,
        "z0": 1.0,
        "n": None,
        "x": None,
        "dt_max": 1e-2,
        "trend_points": None,
        "trend_tol": 0.1,
        "cond_horizon": 50.0,
        "cond_n": None,
        "ladder_n": 20000,
        "skel_dt": 1e-2,
    },
}

OPTIONAL_NONE = {"n_general", "x", "trend_points", "cond_n", "x_grid"}


class ConfigError(ValueError):
    """Invalid or unparsable experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentSpec
    mechanism: BranchingMechanism | None
    kind: str
    params: dict
    directory: Path
    formats: tuple[str, ...]
    master_seed: int
    raw: dict

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


def _reject_unknown(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path: Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("the config must be a mapping")
    return data


def parse_config(data: dict, out_override: str | None = None) -> ExperimentConfig:
    """Validate every field of a raw config before any computation."""
    _reject_unknown(data, {"environment", "mechanism", "experiment", "output", "master_seed"}, "config")
    for key in ("environment", "experiment", "master_seed"):
        if key not in data:
            raise ConfigError(f"missing required key: {key}")
    seed = data["master_seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("master_seed must be a nonnegative integer")
    try:
        env = spec_from_config(dict(data["environment"]))
        mech = mechanism_from_config(dict(data["mechanism"])) if data.get("mechanism") is not None else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc
    exp = data["experiment"]
    if not isinstance(exp, dict):
        raise ConfigError("experiment must be a mapping")
    _reject_unknown(exp, {"kind", "params"}, "experiment")
    kind = exp.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"experiment.kind must be one of {KINDS}")
    if kind != "classify" and mech is None:
        raise ConfigError(f"experiment kind {kind!r} needs a mechanism section")
    given = dict(exp.get("params") or {})
    schema = PARAMS[kind]
    _reject_unknown(given, schema, f"experiment.params ({kind})")
    params = {}
    for key, default in schema.items():
        if key in given:
            params[key] = given[key]
        elif default is None and key not in OPTIONAL_NONE:
            raise ConfigError(f"missing required parameter {key!r} for {kind}")
        else:
            params[key] = default
    _validate_params(kind, params)
    out = dict(data.get("output") or {})
    _reject_unknown(out, {"directory", "formats"}, "output")
    formats = tuple(out.get("formats", ["json", "csv"]))
    if not formats or any(f not in ("json", "csv") for f in formats):
        raise ConfigError("output.formats must be a nonempty subset of [json, csv]")
    directory = Path(out_override or out.get("directory", "results"))
    return ExperimentConfig(env, mech, kind, params, directory, formats, seed, data)


def _validate_params(kind: str, p: dict) -> None:
    def positive(key, integer=False):
        v = p.get(key)
        if v is None:
            return
        if integer and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{key} must be an integer")
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            raise ConfigError(f"{key} must be positive")

    for key in ("t", "z0", "dt", "dt_max", "T_trunc", "tolerance", "skel_dt", "cond_horizon", "dt_max_general", "tol", "trend_tol", "max_rel_err"):
        positive(key)
    for key in ("n", "n_general", "ladder_n", "cond_n", "max_steps", "trend_points"):
        positive(key, integer=True)
    for key in ("t_grid", "x_grid"):
        if p.get(key) is not None:
            v = p[key]
            if not isinstance(v, list) or not v or any(isinstance(u, bool) or not isinstance(u, (int, float)) or u <= 0 for u in v):
                raise ConfigError(f"{key} must be a nonempty list of positive numbers")
    if "lam" in p and (not isinstance(p["lam"], (int, float)) or p["lam"] < 0):
        raise ConfigError("lam must be nonnegative")
    if kind == "survival" and p["route"] not in ("direct", "quenched", "esscher"):
        raise ConfigError("survival route must be direct, quenched or esscher")
    if kind == "rate" and p["route"] not in ("quenched", "esscher"):
        raise ConfigError("rate route must be quenched or esscher")
    if kind == "b1":
        if p["route"] not in ("stable", "general", "both"):
            raise ConfigError("b1 route must be stable, general or both")
        lq = p["lambda_quad"]
        if not isinstance(lq, dict):
            raise ConfigError("lambda_quad must be a mapping")
        _reject_unknown(lq, {"u_min", "u_max", "du"}, "lambda_quad")
    if p.get("method") not in (None, "auto", "ode"):
        raise ConfigError("method must be auto or ode")
    if kind in ("fluctuation", "intermediate-probe") and p.get("x") is not None:
        xs = p["x"] if isinstance(p["x"], list) else [p["x"]]
        if any(not isinstance(v, (int, float)) or v >= 0 for v in xs):
            raise ConfigError("x must be negative")


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _est(e: Estimate) -> dict:
    return {"value": e.value, "std_err": e.std_err, "n": e.n, "seed": e.master_seed, "method": e.method_tag, "bias_notes": e.bias_notes}


def _require_stable(mech: BranchingMechanism, what: str):
    if not mech.is_stable:
        raise PreconditionError(f"{what} needs a stable mechanism (H4 with equality)", "H4")
    return mech.stable


def run_kind(cfg: ExperimentConfig) -> tuple[dict, list[tuple[str, list[str], list[list]]]]:
    """Run one experiment; returns the JSON payload and CSV tables ``(name, header, rows)``."""
    p, env, mech, seed = cfg.params, cfg.environment, cfg.mechanism, cfg.master_seed
    tables: list = []
    if cfg.kind == "classify":
        reg = classify_regime(env, p["tolerance"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, phi2 = laplace_exponent_derivatives(env, 1.0)
        out = {"regime": reg.tag, "phi1_at_0": reg.phi_prime_0, "phi1_at_1": reg.phi_prime_1, "phi2_at_1": phi2}
        return out, tables
    if cfg.kind == "survival":
        if p["route"] == "direct":
            est = survival_mc_direct(mech, env, p["z0"], p["t"], p["n"], p["dt"], seed)
        elif p["route"] == "quenched":
            est = survival_curve_quenched(mech, env, p["z0"], [p["t"]], p["n"], p["dt_max"], seed, p["method"])[0]
        else:
            est = survival_curve_is(mech, env, p["z0"], [p["t"]], p["n"], p["dt_max"], seed, p["method"])[0]
        return {"estimate": _est(est)}, tables
    if cfg.kind == "rate":
        curve_fn = survival_curve_is if p["route"] == "esscher" else survival_curve_quenched
        times = [float(t) for t in p["t_grid"]]
        ests = curve_fn(mech, env, p["z0"], times, p["n"], p["dt_max"], seed, p["method"])
        fit = rate_regression(times, ests, p["max_rel_err"])
        tables.append(("curve", ["t", "p_hat", "se"], [[t, e.value, e.std_err] for t, e in zip(times, ests)]))
        out = {
            "curve": [{"t": t, **_est(e)} for t, e in zip(times, ests)],
            "rate_fit": {
                "rate": fit.rate,
                "poly_exponent": fit.poly_exponent,
                "intercept": fit.intercept,
                "residual_norm": fit.residual_norm,
                "times_used": fit.times_used,
                "rejected": fit.rejected,
            },
        }
        return out, tables
    if cfg.kind == "b1":
        out = {}
        if p["route"] in ("stable", "both"):
            C, beta = _require_stable(mech, "the stable route")
            out["B1_stable"] = _est(estimate_B1_stable(C, beta, env, p["T_trunc"], p["n"], seed, p["dt_max"], p["tol"]))
        if p["route"] in ("general", "both"):
            lq = LambdaQuadrature(**{k: float(v) for k, v in p["lambda_quad"].items()})
            est = estimate_B1_general(mech, env, p["T_trunc"], lq, p["n_general"] or p["n"], seed, p["dt_max_general"])
            out["B1_general"] = {**_est(est), "diagnostics": est.diagnostics}
        return out, tables
    if cfg.kind == "fluctuation":
        times = [float(t) for t in p["t_grid"]]
        ests = reflected_sup_curve(env, float(p["x"]), times, p["n"], p["dt_max"], seed)
        out = {"reflected_sup": [{"t": t, **_est(e)} for t, e in zip(times, ests)]}
        tables.append(("reflected_sup", ["t", "p_hat", "se"], [[t, e.value, e.std_err] for t, e in zip(times, ests)]))
        if p["x_grid"] is not None:
            lad = estimate_ladder_renewal(env, p["x_grid"], p["ladder_n"], p["skel_dt"], seed, p["max_steps"])
            out["ladder"] = {
                "x": lad.x.tolist(),
                "U": lad.U.tolist(),
                "U_se": lad.U_se.tolist(),
                "EH1": _est(lad.eh1),
                "EH1_times_U": lad.product.tolist(),
                "censored_fraction": lad.censored_fraction,
                "refinement_change": lad.refinement_change,
                "r_squared": lad.r_squared(float(lad.x[0]), float(lad.x[-1])) if len(lad.x) > 2 else None,
            }
            tables.append(("ladder", ["x", "U_hat", "se"], [[a, b, c] for a, b, c in zip(lad.x, lad.U, lad.U_se)]))
        return out, tables
    if cfg.kind == "qprocess":
        lhs, rhs = qprocess_laplace_check(mech, env, p["z0"], p["t"], float(p["lam"]), p["n"], seed, p["dt"], p["dt_max"])
        diff = lhs.value - rhs.value
        joint = float(np.hypot(lhs.std_err, rhs.std_err))
        return {"lhs": _est(lhs), "rhs": _est(rhs), "difference": diff, "joint_std_err": joint}, tables
    # intermediate-probe
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = intermediate_constant_probe(
            mech, env, p["z0"], p["x"], [float(t) for t in p["t_grid"]], p["n"], seed,
            dt_max=p["dt_max"], trend_points=p["trend_points"], trend_tol=p["trend_tol"],
            cond_horizon=p["cond_horizon"], cond_n=p["cond_n"], ladder_n=p["ladder_n"], skel_dt=p["skel_dt"],
        )
    tables.append(("normalized", ["t", "normalized", "se"], [[float(t), e.value, e.std_err] for t, e in zip(res.times, res.normalized)]))
    out = {
        "regime": res.regime,
        "normalized": [{"t": float(t), **_est(e)} for t, e in zip(res.times, res.normalized)],
        "log_slope": res.slope,
        "trend_points": res.trend_points,
        "trend_flagged": res.trend_flagged,
        "plateau": _est(res.plateau),
        "plateau_positive_95": res.plateau_positive(),
        "b2_proxy": {str(k): _est(v) for k, v in res.b2_proxy.items()},
        "limit_constant_proxy": {str(k): _est(v) for k, v in res.constant_proxy.items()},
        "warnings": [str(w.message) for w in caught],
    }
    return out, tables


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _classify_error(exc: BaseException) -> tuple[int, dict]:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, {"type": "config_error"}
    if isinstance(exc, PreconditionError):
        return EXIT_PRECONDITION, {"type": "precondition", "hypothesis": exc.hypothesis}
    if isinstance(exc, MomentDomainError):
        return EXIT_PRECONDITION, {"type": "precondition", "hypothesis": "H2"}
    if isinstance(exc, UnsupportedTiltError):
        return EXIT_PRECONDITION, {"type": "precondition", "hypothesis": "H2"}
    if isinstance(exc, DegenerateMechanismError):
        return EXIT_PRECONDITION, {"type": "precondition", "hypothesis": "H3"}
    if isinstance(exc, (SolverFailure, LimitFailure, TruncationError)):
        return EXIT_NUMERICAL, {"type": "numerical", "diagnostics": getattr(exc, "diagnostics", {})}
    if isinstance(exc, (InsufficientPathsError, ContractViolation, FloatingPointError)):
        return EXIT_NUMERICAL, {"type": "numerical"}
    if isinstance(exc, NotImplementedError):
        return EXIT_PRECONDITION, {"type": "precondition", "hypothesis": "unsupported"}
    return EXIT_NUMERICAL, {"type": "numerical", "traceback": traceback.format_exc()}


def _write_csv(path: Path, cfg: ExperimentConfig, header, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.config_hash} master_seed={cfg.master_seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) for v in r])
    path.write_text(buf.getvalue())


def _debug_exports(cfg: ExperimentConfig, stem: str) -> list[str]:
    """One environment path and one population trajectory as CSV files."""
    p = cfg.params
    t = p.get("t") or max(p.get("t_grid") or [1.0])
    dt = p.get("dt", 1e-3)
    path = sample_env_path(cfg.environment, float(t), dt, seed=cfg.master_seed)
    names = [f"{stem}_env_path.csv"]
    path_to_csv(path, cfg.directory / names[0])
    if cfg.mechanism is not None and not cfg.mechanism.tails:
        traj = simulate_cble(cfg.mechanism, path, float(p.get("z0", 1.0)), dt, cfg.master_seed)
        names.append(f"{stem}_trajectory.csv")
        traj.to_csv(cfg.directory / names[1])
    return names


def run_experiment(config_path, workers: int | None = None, out: str | None = None, kind: str | None = None, debug_trajectory: bool = False) -> int:
    """Run one config file; returns the exit status."""
    started = time.time()
    directory = Path(out) if out else None
    try:
        cfg = parse_config(load_config(Path(config_path)), out)
        directory = cfg.directory
        if kind is not None and kind != cfg.kind:
            raise ConfigError(f"subcommand {kind!r} does not match experiment.kind {cfg.kind!r}")
        with np.errstate(over="ignore", under="ignore"):
            payload, tables = run_kind(cfg)
    except Exception as exc:  # mapped to exit codes below
        code, record = _classify_error(exc)
        record.update({"schema": ERROR_SCHEMA, "exit_code": code, "message": str(exc), "config": str(config_path)})
        text = json.dumps(record, sort_keys=True, indent=2, default=str)
        print(text, file=sys.stderr)
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)
            (directory / "error.json").write_text(text + "\n")
        return code
    cfg.directory.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.kind}_{cfg.config_hash[:12]}_seed{cfg.master_seed}"
    files = []
    if "json" in cfg.formats:
        result = {
            "schema": RESULT_SCHEMA,
            "kind": cfg.kind,
            "config_hash": cfg.config_hash,
            "master_seed": cfg.master_seed,
            "params": cfg.params,
            "result": payload,
        }
        name = f"{stem}.json"
        (cfg.directory / name).write_text(json.dumps(result, sort_keys=True, indent=2, default=float) + "\n")
        files.append(name)
    if "csv" in cfg.formats:
        for tname, header, rows in tables:
            name = f"{stem}_{tname}.csv"
            _write_csv(cfg.directory / name, cfg, header, rows)
            files.append(name)
    if debug_trajectory:
        files.extend(_debug_exports(cfg, stem))
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "config_hash": cfg.config_hash,
        "master_seed": cfg.master_seed,
        "toolkit_version": __version__,
        "kind": cfg.kind,
        "workers": workers,
        "wall_time_s": time.time() - started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "files": files,
    }
    (cfg.directory / f"{stem}_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"status": "ok", "kind": cfg.kind, "files": files}, sort_keys=True))
    return EXIT_OK


def _config_files(target: Path) -> list[Path]:
    if target.is_dir():
        return sorted(p for p in target.iterdir() if p.suffix in (".yaml", ".yml", ".json"))
    return [target]


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        return 1
    return max(1, value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cble-lab", description="Experiments on branching processes in Lévy environments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in KINDS + ("run",):
        sp = sub.add_parser(name, help="run every config of a directory" if name == "run" else f"{name} experiment")
        sp.add_argument("--config", required=True, help="config file (or directory for 'run')")
        sp.add_argument("--workers", type=int, default=None, help=f"worker cap (default from {WORKERS_ENV}, else 1)")
        sp.add_argument("--out", default=None, help="output directory (overrides output.directory)")
        sp.add_argument("--debug-trajectory", action="store_true", help="also export one environment path and population trajectory as CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    workers = args.workers if args.workers is not None else _default_workers()
    if workers < 1:
        print(json.dumps({"schema": ERROR_SCHEMA, "exit_code": EXIT_CONFIG, "message": "--workers must be >= 1"}), file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        target = Path(args.config)
        files = _config_files(target)
        if not files:
            print(json.dumps({"schema": ERROR_SCHEMA, "exit_code": EXIT_CONFIG, "message": f"no configs in {target}"}), file=sys.stderr)
            return EXIT_CONFIG
        codes = [run_experiment(f, workers, args.out, None, args.debug_trajectory) for f in files]
        return max(codes)
    return run_experiment(args.config, workers, args.out, args.command, args.debug_trajectory)


if __name__ == "__main__":
    sys.exit(main())
