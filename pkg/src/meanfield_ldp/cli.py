"""Config-driven command line for all pipelines.

One JSON config file drives every subcommand; defaulted fields are echoed
into ``resolved-config.json`` next to the outputs, and a ``run-manifest``
records seeds, library versions, the RNG algorithm, and wall time, so any
run can be reproduced bit-for-bit from its artifacts.

Exit codes: 0 success, 2 validation/config failure, 3 numerical
divergence, 4 non-converged rate optimization.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, rng
from .currents import (
    CurrentCoefficients,
    ModeGrid,
    SobolevIndex,
    current_fourier_coefficients,
    dual_pseudo_norm,
    save_coefficients,
)
from .laplace import (
    ScanSchedule,
    TanhOfMean,
    laplace_naive,
    ldp_scaling_scan,
    variational_bound,
)
from .models import (
    GradientPotential,
    InitialEnsemble,
    LinearInteraction,
    ModelValidationError,
    validate_model,
)
from .rate import RateEvaluationError, TerminalMeanTarget, optimize_rate
from .simulate import (
    PathEnsemble,
    SimConfig,
    SimulationDivergedError,
    moment_diagnostics,
    save_paths,
    simulate,
)
from .vlasov import limit_current_coefficients, solve_limit_flow

SUBCOMMANDS = ("simulate", "limit", "current", "rate", "laplace", "scan", "validate")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGED = 3
EXIT_NONCONVERGED = 4


class ConfigError(ValueError):
    """Configuration is malformed; message carries the offending path."""


DEFAULT_CONFIG = {
    "model": {
        "family": "linear",
        "a": [[-1.0]],
        "b": [[0.0]],
        "c": [0.0],
        "sigma0": [[1.0]],
        "sigma1": [[0.0]],
        "mean_gain": 0.0,
        "declared_l": 2.0,
        "potential": [0.0],
        "kappa": 0.0,
    },
    "init": {
        "kind": "gaussian_stencil",
        "points": [],
        "x": [0.0],
        "mean": 1.0,
        "std": 0.5,
        "seed": 7,
        "description": "",
    },
    "sim": {
        "n": 64,
        "horizon": 1.0,
        "steps": 128,
        "epsilon": 0.3,
        "eps_rule": "explicit",
        "alpha": None,
        "master_seed": 12345,
        "replica_index": 0,
    },
    "currents": {
        "n_max": 8,
        "xi_max": 4.0,
        "xi_points": 17,
        "a": None,
        "b": None,
        "s1": 0.75,
        "s2": None,
        "source": "simulate",
    },
    "rate": {
        "target": {"kind": "terminal_mean", "delta": [2.0]},
        "bins": 16,
        "steps": 128,
        "particles": 8,
        "iterations": 500,
        "restarts": 3,
        "penalty0": 10.0,
        "fd_step": 1e-05,
        "step0": 0.05,
        "tol": 1e-08,
    },
    "laplace": {
        "functional": {"kind": "tanh_of_mean", "w": [1.0], "q": 0.0, "kappa": 0.1},
        "replicas": 256,
        "optimize_control": False,
        "schedule": {"n_list": [16, 32, 64], "alpha": 0.25, "steps": 128},
    },
    "validate": {"probe_count": 200, "seed": 0, "probe_radius": 10.0},
    "output": {"dir": "out", "dump_paths": False},
    "threads": 1,
}


def _merge_defaults(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config field '{where}'")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge_defaults(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | Path, overrides: list[str] | None = None) -> dict:
    """Parse, default-fill, and override a run configuration."""
    raw = Path(path).read_text()
    try:
        given = json.loads(raw)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from err
    if not isinstance(given, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = _merge_defaults(DEFAULT_CONFIG, given)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects path=value, got {item!r}")
        dotted, _, literal = item.partition("=")
        try:
            value = json.loads(literal)
        except json.JSONDecodeError:
            value = literal
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"--set path '{dotted}' does not exist")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"--set path '{dotted}' does not exist")
        node[parts[-1]] = value
    env_seed = os.environ.get("MEANFIELD_SEED")
    if env_seed is not None:
        cfg["sim"]["master_seed"] = int(env_seed)
    return cfg


def build_model(block: dict):
    family = block["family"]
    if family == "linear":
        return LinearInteraction(
            a_matrix=block["a"],
            b_matrix=block["b"],
            c_vector=block["c"],
            sigma0=block["sigma0"],
            sigma1=block["sigma1"],
            mean_gain=block["mean_gain"],
            declared_l=block["declared_l"],
        )
    if family == "gradient":
        return GradientPotential(
            potential_coeffs=block["potential"],
            kappa=block["kappa"],
            sigma0=block["sigma0"],
            declared_l=block["declared_l"],
        )
    raise ConfigError(f"model.family must be 'linear' or 'gradient', got {family!r}")


def build_init(block: dict, n: int) -> InitialEnsemble:
    kind = block["kind"]
    if kind == "points":
        pts = np.asarray(block["points"], dtype=float)
        if pts.size == 0:
            raise ConfigError("init.points must be nonempty for kind='points'")
        return InitialEnsemble(pts, block["description"] or "inline points")
    if kind == "dirac":
        return InitialEnsemble.dirac(block["x"], n)
    if kind == "gaussian_stencil":
        return InitialEnsemble.gaussian_stencil(n, mean=block["mean"], std=block["std"])
    if kind == "gaussian_sample":
        d = len(block["x"])
        cov = (block["std"] ** 2) * np.eye(d)
        return InitialEnsemble.gaussian_sample(n, block["x"], cov, seed=block["seed"])
    raise ConfigError(f"unknown init.kind {kind!r}")


def build_sim_config(block: dict) -> SimConfig:
    return SimConfig(
        n=block["n"],
        horizon=block["horizon"],
        steps=block["steps"],
        epsilon=block["epsilon"],
        eps_rule=block["eps_rule"],
        alpha=block["alpha"],
        master_seed=block["master_seed"],
        replica_index=block["replica_index"],
    )


def build_grid(block: dict, d: int, horizon: float) -> tuple[ModeGrid, SobolevIndex]:
    a = block["a"] if block["a"] is not None else -horizon / 4.0
    b = block["b"] if block["b"] is not None else 1.25 * horizon
    grid = ModeGrid(
        d=d,
        n_max=block["n_max"],
        xi_max=block["xi_max"],
        xi_points=block["xi_points"],
        a=a,
        b=b,
        horizon=horizon,
    )
    s2 = block["s2"] if block["s2"] is not None else d / 2 + 1.25
    return grid, SobolevIndex(s1=block["s1"], s2=s2)


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with path.open("w", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _emit_resolved(cfg: dict, outdir: Path) -> None:
    (outdir / "resolved-config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    )


def _emit_manifest(outdir: Path, subcommand: str, cfg: dict, t0: float, exit_code: int) -> None:
    import scipy

    manifest = {
        "subcommand": subcommand,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "rng_algorithm": rng.ALGORITHM,
        "master_seed": cfg["sim"]["master_seed"],
        "threads": cfg["threads"],
        "wall_time_s": time.time() - t0,
        "exit_code": exit_code,
    }
    (outdir / "run-manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _run_validate(cfg: dict, outdir: Path) -> int:
    model = build_model(cfg["model"])
    block = cfg["validate"]
    report = validate_model(
        model, probe_count=block["probe_count"], seed=block["seed"], probe_radius=block["probe_radius"]
    )
    _write_csv(
        outdir / "validate-report.csv",
        [
            {
                "passed": int(report.passed),
                "max_ratio": repr(report.max_ratio),
                "probes": report.probes,
                "probe_radius": "" if report.probe_radius is None else repr(report.probe_radius),
                "sigma_bound_ok": int(report.sigma_bound_ok),
                "max_sigma_norm": repr(report.max_sigma_norm),
                "messages": "; ".join(report.messages),
            }
        ],
    )
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _run_simulate(cfg: dict, outdir: Path) -> int:
    model = build_model(cfg["model"])
    sim = build_sim_config(cfg["sim"])
    init = build_init(cfg["init"], sim.n)
    ens = simulate(model, init, sim)
    report = moment_diagnostics(ens)
    terminal = ens.states[:, -1, :].mean(axis=0)
    _write_csv(
        outdir / "simulate-moments.csv",
        [
            {
                "N": sim.n,
                "steps": sim.steps,
                "epsilon": repr(sim.epsilon),
                "sup_moment": repr(report.sup_moment),
                "control_energy": repr(report.control_energy),
                "bound": repr(report.bound),
                "satisfied": int(report.satisfied),
                "terminal_mean": repr(float(terminal[0])),
                "seed": sim.master_seed,
            }
        ],
    )
    if cfg["output"]["dump_paths"]:
        save_paths(ens, outdir / "paths.bin")
    return EXIT_OK


def _run_limit(cfg: dict, outdir: Path) -> int:
    model = build_model(cfg["model"])
    sim = cfg["sim"]
    init = build_init(cfg["init"], sim["n"])
    flow = solve_limit_flow(model, init, sim["horizon"], sim["steps"])
    terminal = flow.terminal_mean()
    spread = float(flow.trajectories[:, -1, :].std())
    _write_csv(
        outdir / "limit-summary.csv",
        [
            {
                "K": flow.n,
                "steps": flow.steps,
                "terminal_mean": repr(float(terminal[0])),
                "terminal_spread": repr(spread),
            }
        ],
    )
    if cfg["output"]["dump_paths"]:
        ens = PathEnsemble(
            states=flow.trajectories,
            noise_increments=np.zeros((flow.n, flow.steps, model.m)),
            controls=np.zeros((flow.n, flow.steps, model.m)),
            config=SimConfig(
                n=flow.n,
                horizon=sim["horizon"],
                steps=sim["steps"],
                epsilon=0.0,
                master_seed=sim["master_seed"],
            ),
            model=model,
        )
        save_paths(ens, outdir / "limit-paths.bin")
    return EXIT_OK


def _run_current(cfg: dict, outdir: Path) -> int:
    model = build_model(cfg["model"])
    sim = build_sim_config(cfg["sim"])
    init = build_init(cfg["init"], sim.n)
    grid, sob = build_grid(cfg["currents"], model.d, sim.horizon)
    if cfg["currents"]["source"] == "limit":
        flow = solve_limit_flow(model, init, sim.horizon, sim.steps)
        cur = limit_current_coefficients(flow, grid)
    else:
        ens = simulate(model, init, sim)
        cur = current_fourier_coefficients(ens, grid)
    save_coefficients(cur, outdir / "current-coefficients.bin")
    _write_csv(
        outdir / "current-norms.csv",
        [
            {
                "provenance": cur.provenance,
                "pseudo_norm": repr(dual_pseudo_norm(cur, sob)),
                "conjugate_defect": repr(cur.conjugate_symmetry_defect()),
                "s1": repr(sob.s1),
                "s2": repr(sob.s2),
                "n_max": grid.n_max,
                "xi_points": grid.xi_points,
                "seed": sim.master_seed,
            }
        ],
    )
    return EXIT_OK


def _run_rate(cfg: dict, outdir: Path) -> int:
    model = build_model(cfg["model"])
    block = cfg["rate"]
    init = build_init(cfg["init"], block["particles"])
    target_block = block["target"]
    if target_block["kind"] != "terminal_mean":
        raise ConfigError("only terminal_mean targets are configurable from file")
    target = TerminalMeanTarget(target_block["delta"])
    result, _ = optimize_rate(
        model,
        init,
        cfg["sim"]["horizon"],
        block["steps"],
        target,
        bins=block["bins"],
        iterations=block["iterations"],
        restarts=block["restarts"],
        penalty0=block["penalty0"],
        fd_step=block["fd_step"],
        step0=block["step0"],
        tol=block["tol"],
    )
    _write_csv(outdir / "rate.csv", [result.csv_row()])
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def _build_functional(block: dict):
    if block["kind"] != "tanh_of_mean":
        raise ConfigError("only tanh_of_mean functionals are configurable from file")
    return TanhOfMean(w=block["w"], q=block["q"], kappa=block["kappa"])


def _optimized_control(cfg: dict, model, functional):
    """Rate-optimized control for the scan: pick the terminal-mean target
    minimizing (rate cost + F at the controlled limit mean) on a coarse grid."""
    horizon = cfg["laplace"]["schedule"].get("horizon", cfg["sim"]["horizon"])
    steps = cfg["rate"]["steps"]
    init = build_init(cfg["init"], cfg["rate"]["particles"])
    flow0 = solve_limit_flow(model, init, horizon, steps)
    m_star = flow0.terminal_mean()
    best = None
    direction = functional.w / np.linalg.norm(functional.w)
    for frac in (0.0, -0.1, -0.2, -0.35, -0.5):
        delta = m_star + frac * direction
        result, ce = optimize_rate(
            model,
            init,
            horizon,
            steps,
            TerminalMeanTarget(delta),
            bins=cfg["rate"]["bins"],
            iterations=150,
            restarts=cfg["rate"]["restarts"],
        )
        total = result.cost + functional.evaluate_at_mean(ce.flow.terminal_mean())
        if best is None or total < best[0]:
            best = (total, result.control)
    return best[1]


def _run_laplace(cfg: dict, outdir: Path) -> int:
    model = build_model(cfg["model"])
    sim = build_sim_config(cfg["sim"])
    init = build_init(cfg["init"], sim.n)
    functional = _build_functional(cfg["laplace"]["functional"])
    replicas = cfg["laplace"]["replicas"]
    threads = cfg["threads"]
    naive = laplace_naive(model, init, sim, functional, replicas, threads)
    rows = [
        {
            "estimator": "laplace-naive",
            "value": repr(naive.value),
            "se": repr(naive.std_error),
            "replicas": naive.replicas,
            "aN": repr(naive.a_n),
            "control": "",
            "seed": sim.master_seed,
        }
    ]
    bound = variational_bound(model, init, sim, functional, None, replicas, threads)
    rows.append(
        {
            "estimator": "variational-bound",
            "value": repr(bound.value),
            "se": repr(bound.std_error),
            "replicas": bound.replicas,
            "aN": repr(bound.a_n),
            "control": "zero",
            "seed": sim.master_seed,
        }
    )
    if cfg["laplace"]["optimize_control"]:
        ctrl = _optimized_control(cfg, model, functional)
        opt = variational_bound(model, init, sim, functional, ctrl, replicas, threads)
        rows.append(
            {
                "estimator": "variational-bound",
                "value": repr(opt.value),
                "se": repr(opt.std_error),
                "replicas": opt.replicas,
                "aN": repr(opt.a_n),
                "control": "rate-optimized",
                "seed": sim.master_seed,
            }
        )
    _write_csv(outdir / "laplace.csv", rows)
    return EXIT_OK


def _run_scan(cfg: dict, outdir: Path) -> int:
    model = build_model(cfg["model"])
    functional = _build_functional(cfg["laplace"]["functional"])
    sched_block = cfg["laplace"]["schedule"]
    schedule = ScanSchedule(
        n_list=tuple(sched_block["n_list"]),
        alpha=sched_block["alpha"],
        replicas=cfg["laplace"]["replicas"],
        steps=sched_block["steps"],
        horizon=cfg["sim"]["horizon"],
        master_seed=cfg["sim"]["master_seed"],
    )
    init_block = cfg["init"]

    def family(n: int) -> InitialEnsemble:
        return build_init(init_block, n)

    ctrl = None
    if cfg["laplace"]["optimize_control"]:
        ctrl = _optimized_control(cfg, model, functional)
    report = ldp_scaling_scan(model, family, functional, schedule, ctrl, cfg["threads"])
    _write_csv(outdir / "scan.csv", [row.csv_row() for row in report.rows])
    (outdir / "scan-summary.json").write_text(
        json.dumps(
            {"kendall_tau": report.kendall_tau, "functional": report.functional}, indent=2
        )
        + "\n"
    )
    return EXIT_OK


_RUNNERS = {
    "validate": _run_validate,
    "simulate": _run_simulate,
    "limit": _run_limit,
    "current": _run_current,
    "rate": _run_rate,
    "laplace": _run_laplace,
    "scan": _run_scan,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="meanfield-ldp",
        description="Mean-field particle systems, currents, rate functions, Laplace bounds.",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", help="path to the JSON run configuration")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="override a config field, e.g. --set sim.n=256",
    )
    parser.add_argument("--output-dir", default=None, help="override output.dir")
    args = parser.parse_args(argv)

    t0 = time.time()
    try:
        cfg = load_config(args.config, args.overrides)
    except (ConfigError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.output_dir is not None:
        cfg["output"]["dir"] = args.output_dir
    outdir = Path(cfg["output"]["dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    _emit_resolved(cfg, outdir)
    try:
        code = _RUNNERS[args.subcommand](cfg, outdir)
    except (ConfigError, ModelValidationError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        code = EXIT_VALIDATION
    except SimulationDivergedError as err:
        print(f"diverged: {err}", file=sys.stderr)
        code = EXIT_DIVERGED
    except RateEvaluationError as err:
        print(f"rate evaluation failed: {err}", file=sys.stderr)
        code = EXIT_NONCONVERGED
    _emit_manifest(outdir, args.subcommand, cfg, t0, code)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
