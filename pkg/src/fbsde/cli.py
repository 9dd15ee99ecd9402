"""Command-line front end: solve, simulate, verify, sweep, check-assumptions.

Configuration comes from an optional flat key-value file (``key = value``
lines, dotted section names) overridden by command-line flags.  Every
run writes ``report.json`` with the resolved configuration and seeds;
``solve`` adds ``field.csv``, ``simulate``/``verify`` add ``paths.csv``
and ``sweep`` writes ``sweep.csv``.  Floating-point CSV output uses 17
significant digits so values round-trip losslessly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .catalog import BuiltProblem, build_problem
from .errors import ConfigError, FbsdeError
from .pipeline import ResidualReport, bsde_residual, link_ensemble
from .paths import simulate_ensemble
from .problem import AssumptionCheck, AssumptionReport, check_ellipticity, check_growth
from .solver import (
    Diagnostics,
    MaxPrincipleResult,
    SolutionField,
    check_max_principle,
    solve_final_value,
)

__all__ = ["RunConfig", "run", "sweep", "main"]

_ENV_OUT_DIR = "FBSDE_OUTPUT_DIR"
_STAGES = ("assumptions", "solve", "simulate", "verify")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one pipeline run."""

    problem: str
    params: dict = field(default_factory=dict)
    stages: tuple[str, ...] = ("solve",)
    nodes: Optional[int] = None
    steps: Optional[int] = None
    cutoff_width: Optional[float] = None
    solver_mode: Optional[str] = None
    paths: int = 256
    dt: Optional[float] = None
    seed: int = 0
    x0: Optional[tuple[float, ...]] = None
    out_dir: Path = Path(".")
    rungs: int = 0

    def validate(self) -> None:
        for stage in self.stages:
            if stage not in _STAGES:
                raise ConfigError(f"unknown stage {stage!r}")
        if "simulate" in self.stages or self.rungs:
            if self.paths < 1:
                raise ConfigError("paths must be >= 1")
            if self.dt is not None and self.dt <= 0.0:
                raise ConfigError("dt must be positive")
        if self.nodes is not None and self.nodes < 3:
            raise ConfigError("nodes must be >= 3")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be >= 1")


def parse_config_file(path: str | Path) -> dict[str, tuple[str, int]]:
    """Flat ``key = value`` file with dotted sections; returns values with line numbers."""
    out: dict[str, tuple[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key or not value:
                raise ConfigError(f"{path}:{lineno}: empty key or value")
            out[key] = (value, lineno)
    return out


_FILE_KEYS = {
    "problem": str,
    "solver.nodes": int,
    "solver.steps": int,
    "solver.cutoff_width": float,
    "solver.mode": str,
    "sim.paths": int,
    "sim.dt": float,
    "sim.seed": int,
    "out.dir": str,
    "sweep.rungs": int,
}


def _apply_config_file(path: str | Path, base: dict) -> dict:
    parsed = parse_config_file(path)
    for key, (value, lineno) in parsed.items():
        if key.startswith("param."):
            base.setdefault("params", {})[key[len("param.") :]] = value
            continue
        if key not in _FILE_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            coerced = _FILE_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
        base[key.split(".")[-1] if "." in key else key] = coerced
        if key == "solver.mode":
            base["solver_mode"] = coerced
            base.pop("mode", None)
        if key == "out.dir":
            base["out_dir"] = Path(coerced)
            base.pop("dir", None)
    return base


def _build(config: RunConfig) -> BuiltProblem:
    built = build_problem(
        config.problem,
        config.params,
        cutoff_width=config.cutoff_width,
        linear_solver=config.solver_mode,
    )
    cfg = built.solver_config
    if config.nodes is not None:
        grid = dataclasses.replace(cfg.grid, shape=(config.nodes,) * cfg.grid.ndim)
        cfg = replace(cfg, grid=grid)
    if config.steps is not None:
        cfg = replace(cfg, n_steps=config.steps)
    if cfg is not built.solver_config:
        built = replace(built, solver_config=cfg)
    if config.x0 is not None:
        built = replace(built, x0=np.asarray(config.x0, dtype=float))
    return built


def _assumption_report(built: BuiltProblem) -> AssumptionReport:
    meas = built.spec.measure
    mass_check = AssumptionCheck(
        name="B2",
        samples=len(meas),
        worst_margin=-float(meas.total_mass),
        passed=True,
    )
    ell = check_ellipticity(built.spec, built.ellipticity_samples)
    growth = check_growth(built.spec, built.growth_samples, built.envelopes)
    return AssumptionReport(entries=(ell, mass_check, growth))


def _write_field_csv(path: Path, field_obj: SolutionField) -> None:
    grid = field_obj.grid
    nodes = grid.nodes()
    n = grid.ndim
    m = field_obj.m
    header = (
        ["level", "t"]
        + [f"x_{i}" for i in range(n)]
        + [f"field_{c}" for c in range(m)]
        + [f"grad_{c}_{i}" for c in range(m) for i in range(n)]
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for lev, t in enumerate(field_obj.times):
            vals = field_obj.values[lev]
            grads = field_obj.gradients[lev]
            for node in range(grid.n_nodes):
                row = [str(lev), _fmt(t)]
                row += [_fmt(v) for v in nodes[node]]
                row += [_fmt(v) for v in vals[node]]
                row += [_fmt(grads[node, c, i]) for c in range(m) for i in range(n)]
                fh.write(",".join(row) + "\n")


def _write_paths_csv(path: Path, linked_list) -> None:
    if not linked_list:
        raise ValueError("no paths to write")
    n = linked_list[0].path.states.shape[1]
    m = linked_list[0].y.shape[1]
    header = (
        ["path", "t"]
        + [f"x_{i}" for i in range(n)]
        + [f"y_{c}" for c in range(m)]
        + ["jumps"]
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for pid, lp in enumerate(linked_list):
            jumps_per_interval = np.zeros(lp.path.n_steps, dtype=int)
            for ev in lp.path.events:
                jumps_per_interval[ev.interval] += 1
            for j, t in enumerate(lp.path.times):
                row = [str(pid), _fmt(t)]
                row += [_fmt(v) for v in lp.path.states[j]]
                row += [_fmt(v) for v in lp.y[j]]
                row.append(str(int(jumps_per_interval[j - 1])) if j > 0 else "0")
                fh.write(",".join(row) + "\n")


def _report_dict(
    config: RunConfig,
    built: BuiltProblem,
    assumptions: Optional[AssumptionReport],
    diag: Optional[Diagnostics],
    max_principle: Optional[MaxPrincipleResult],
    residuals: Optional[ResidualReport],
    checks: dict,
) -> dict:
    report: dict = {
        "config": {
            "problem": config.problem,
            "params": {k: str(v) for k, v in config.params.items()},
            "stages": list(config.stages),
            "nodes": built.solver_config.grid.shape,
            "steps": built.solver_config.n_steps,
            "cutoff_width": built.solver_config.cutoff_width,
            "linear_solver": built.solver_config.linear_solver,
            "paths": config.paths,
            "dt": config.dt if config.dt is not None else built.default_path_dt,
            "x0": list(np.asarray(built.x0, dtype=float)),
            "out_dir": str(config.out_dir),
        },
        "seeds": {"base_seed": config.seed, "stream_ids": f"0..{config.paths - 1}"},
        "checks": checks,
    }
    if assumptions is not None:
        report["assumptions"] = {
            "passed": assumptions.passed,
            "entries": [
                {
                    "name": e.name,
                    "samples": e.samples,
                    "worst_margin": e.worst_margin,
                    "passed": e.passed,
                }
                for e in assumptions.entries
            ],
        }
    if diag is not None:
        report["diagnostics"] = {
            "sup_u": [float(v) for v in diag.sup_u],
            "sup_gradient": [float(v) for v in diag.sup_gradient],
            "initial_data_sup": diag.initial_data_sup,
            "boundary_data_sup": diag.boundary_data_sup,
            "lambda_rate": diag.lambda_rate,
            "coarse_time_grid": diag.coarse_time_grid,
            "constants": dataclasses.asdict(diag.constants),
        }
    if max_principle is not None:
        report["max_principle"] = {
            "passed": max_principle.passed,
            "margin": max_principle.margin,
            "bound": max_principle.bound,
            "observed": max_principle.observed,
            "lambda_rate": max_principle.lambda_rate,
            "first_violation_level": max_principle.first_violation_level,
        }
    if residuals is not None:
        report["residuals"] = {
            "rms": residuals.rms,
            "mean": [float(v) for v in residuals.mean],
            "stderr": [float(v) for v in residuals.stderr],
            "class_s_norm": residuals.class_s_norm,
            "excluded_paths": residuals.excluded_paths,
            "total_paths": residuals.total_paths,
        }
    return report


def run(config: RunConfig) -> int:
    """Execute the selected stages; exit status 1 if an enabled check fails."""
    config.validate()
    built = _build(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    assumptions = None
    diag = None
    field_obj = None
    max_principle = None
    residuals = None
    checks: dict = {}

    if "assumptions" in config.stages:
        assumptions = _assumption_report(built)
        checks["assumptions_pass"] = assumptions.passed

    needs_solve = bool({"solve", "simulate", "verify"} & set(config.stages))
    if needs_solve:
        field_obj, diag = solve_final_value(
            built.spec, built.solver_config, built.constants
        )
        max_principle = check_max_principle(field_obj, diag)
        checks["max_principle_pass"] = max_principle.passed
        if "solve" in config.stages:
            _write_field_csv(out_dir / "field.csv", field_obj)

    if "simulate" in config.stages or "verify" in config.stages:
        dt = config.dt if config.dt is not None else built.default_path_dt
        ensemble = simulate_ensemble(
            field_obj, built.spec, built.x0, dt, config.paths, config.seed
        )
        linked = link_ensemble(ensemble, field_obj, built.spec)
        _write_paths_csv(out_dir / "paths.csv", linked)
        residuals = bsde_residual(linked, built.spec)
        # exits are expected on tight boxes; they are reported, not fatal
        checks["residual_finite"] = bool(np.isfinite(residuals.rms))

    report = _report_dict(
        config, built, assumptions, diag, max_principle, residuals, checks
    )
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return 0 if all(checks.values()) else 1


def sweep(config: RunConfig) -> int:
    """Refinement ladder (h, dt) -> (h/2, dt/4); one CSV row per rung."""
    config.validate()
    if config.rungs < 2:
        raise ConfigError("sweep needs at least 2 rungs")
    built0 = _build(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    base_nodes = built0.solver_config.grid.shape[0]
    base_steps = built0.solver_config.n_steps
    base_dt = config.dt if config.dt is not None else built0.default_path_dt

    rows = []
    prev_err = None
    prev_rms = None
    for r in range(config.rungs):
        nodes = (base_nodes - 1) * 2**r + 1
        steps = base_steps * 4**r
        path_dt = base_dt / 2**r
        rung_cfg = replace(config, nodes=nodes, steps=steps, dt=path_dt)
        built = _build(rung_cfg)
        field_obj, _ = solve_final_value(built.spec, built.solver_config, built.constants)

        if built.oracle is not None:
            nodes_xy = field_obj.grid.nodes()
            err = max(
                float(
                    np.max(
                        np.abs(
                            field_obj.values[lev]
                            - np.asarray(built.oracle(float(t), nodes_xy)).reshape(
                                field_obj.values[lev].shape
                            )
                        )
                    )
                )
                for lev, t in enumerate(field_obj.times)
            )
        else:
            err = None

        ensemble = simulate_ensemble(
            field_obj, built.spec, built.x0, path_dt, config.paths, config.seed
        )
        linked = link_ensemble(ensemble, field_obj, built.spec)
        rms = bsde_residual(linked, built.spec).rms

        err_ratio = (prev_err / err) if (err and prev_err) else None
        rms_ratio = (prev_rms / rms) if (rms and prev_rms) else None
        rows.append(
            {
                "rung": r,
                "nodes": nodes,
                "steps": steps,
                "h": float(field_obj.grid.spacings[0]),
                "dt_solver": built.spec.horizon / steps,
                "path_dt": path_dt,
                "field_error": err,
                "residual_rms": rms,
                "field_error_ratio": err_ratio,
                "residual_ratio": rms_ratio,
            }
        )
        prev_err = err
        prev_rms = rms

    header = [
        "rung",
        "nodes",
        "steps",
        "h",
        "dt_solver",
        "path_dt",
        "field_error",
        "residual_rms",
        "field_error_ratio",
        "residual_ratio",
    ]
    with open(out_dir / "sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for key in header:
                v = row[key]
                if v is None:
                    cells.append("")
                elif isinstance(v, int):
                    cells.append(str(v))
                else:
                    cells.append(_fmt(v))
            fh.write(",".join(cells) + "\n")
    return 0


def _parse_params(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--param needs NAME=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbsde",
        description="Decoupling-field solver and jump-diffusion verification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", help="catalog problem name")
    common.add_argument("--param", action="append", default=[], metavar="NAME=VALUE")
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--nodes", type=int, dest="nodes")
    common.add_argument("--grid", type=int, dest="nodes", help="alias for --nodes")
    common.add_argument("--steps", type=int)
    common.add_argument("--cutoff-width", type=float, dest="cutoff_width")
    common.add_argument(
        "--solver", choices=("auto", "tridiag", "adi", "sparse"), dest="solver_mode"
    )
    common.add_argument("--out", dest="out_dir", help="output directory")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--paths", type=int, default=None)
    sim.add_argument("--dt", type=float, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--x0", help="comma-separated start point")

    sub.add_parser("solve", parents=[common], help="solve the field, write field.csv")
    sub.add_parser(
        "simulate", parents=[common, sim], help="solve then simulate paths"
    )
    sub.add_parser(
        "verify",
        parents=[common, sim],
        help="assumptions + solve + simulate + checks",
    )
    sweep_p = sub.add_parser("sweep", parents=[common, sim], help="refinement ladder")
    sweep_p.add_argument("--rungs", type=int, default=None)
    sub.add_parser(
        "check-assumptions", parents=[common], help="sampled assumption checks"
    )
    return parser


_COMMAND_STAGES = {
    "solve": ("solve",),
    "simulate": ("solve", "simulate"),
    "verify": ("assumptions", "solve", "simulate", "verify"),
    "check-assumptions": ("assumptions",),
}


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    settings: dict = {"params": {}}
    if args.config:
        settings = _apply_config_file(args.config, settings)
    settings["params"].update(_parse_params(args.param))

    def pick(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return settings.get(key, default)

    problem = args.problem or settings.get("problem")
    if not problem:
        raise ConfigError("a problem name is required (--problem or config file)")
    out_default = os.environ.get(_ENV_OUT_DIR, "fbsde-out")
    config = RunConfig(
        problem=problem,
        params=settings["params"],
        stages=_COMMAND_STAGES.get(args.command, ()),
        nodes=pick(args.nodes, "nodes", None),
        steps=pick(args.steps, "steps", None),
        cutoff_width=pick(args.cutoff_width, "cutoff_width", None),
        solver_mode=pick(args.solver_mode, "solver_mode", None),
        paths=int(pick(getattr(args, "paths", None), "paths", 256)),
        dt=pick(getattr(args, "dt", None), "dt", None),
        seed=int(pick(getattr(args, "seed", None), "seed", 0)),
        x0=tuple(float(v) for v in args.x0.split(","))
        if getattr(args, "x0", None)
        else None,
        out_dir=Path(pick(args.out_dir, "out_dir", out_default)),
        rungs=int(pick(getattr(args, "rungs", None), "rungs", 0)),
    )
    return config


def main(argv: Optional[list[str]] = None) -> int:
    parser = _make_parser()
    args = parser.parse_args(argv)
    try:
        config = _config_from_args(args)
        if args.command == "sweep":
            return sweep(config)
        return run(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FbsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
