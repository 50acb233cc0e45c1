"""Command-line experiment runner.

Every subcommand reads one YAML config; only ``--output-dir`` and ``--seed``
may override it.  Exit codes: 0 success, 1 a checked bound was violated,
2 invalid config, 3 integrator blowup, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import report
from .attractor import (
    absorbing_radii, asymptotic_autonomy_sweep, check_absorption, make_initial_family,
    pullback_estimate,
)
from .bounds import (
    check_energy_bound, check_enstrophy_bound, check_vorticity_linf, check_vorticity_lp,
    vanishing_viscosity_sweep,
)
from .config import ConfigParseError, ExperimentConfig, validate
from .dynamics import TrajectoryRecord, VorticityState, evolve
from .errors import BlowupError, DataError, ParameterError, RangeError
from .field import ScalarField, random_smooth_vorticity
from .noise import OUPath, sample_ou

EXIT_OK, EXIT_VIOLATION, EXIT_INVALID, EXIT_BLOWUP, EXIT_IO = 0, 1, 2, 3, 4


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------- shared pieces

def _noise(cfg: ExperimentConfig) -> OUPath:
    z = cfg.raw["noise"]
    return sample_ou(float(z["t_min"]), float(z["t_max"]), float(z["dt"]), cfg.seed)


def _initial_state(cfg: ExperimentConfig, grid, t: float) -> VorticityState:
    ini = cfg.raw["initial"]
    if ini["kind"] == "zero" or float(ini["curl_inf"]) == 0.0:
        return VorticityState.zeros(grid, t)
    # initial data gets its own stream so it does not overlap the noise streams
    rng = np.random.default_rng([cfg.seed, 1])
    rho = random_smooth_vorticity(grid, rng, modes=int(ini["modes"])).data
    rho = rho * (float(ini["curl_inf"]) / float(np.abs(rho).max()))
    return VorticityState.from_vorticity(t, ScalarField(grid, rho))


def _write_noise(out: Path, ou: OUPath, tag: str) -> None:
    report.write_csv(out / "noise.csv", {"t": ou.times, "W": ou.wiener.values, "y": ou.values}, tag)


def _simulate(cfg: ExperimentConfig, out: Path, tag: str) -> TrajectoryRecord:
    e = cfg.experiment
    grid = cfg.grid()
    solver, spec, ou = cfg.solver(grid), cfg.forcing(grid), _noise(cfg)
    tau, t_end = float(e["tau"]), float(e["t_end"])
    u0 = _initial_state(cfg, grid, tau)
    _write_noise(out, ou, tag)
    traj = evolve(u0, tau, t_end, ou, spec, solver)
    traj.save(out / "trajectory", tag=tag)
    return traj


# ---------------------------------------------------------------- experiments

def run_simulate(cfg: ExperimentConfig, out: Path, tag: str) -> tuple[int, dict]:
    traj = _simulate(cfg, out, tag)
    phys = {k: traj.physical(k) for k in ("rho_l2", "rho_linf", "v_V")}
    cols = {"t": traj.times, "y": traj.y}
    cols.update({f"{k}_physical": v for k, v in phys.items()})
    report.write_csv(out / "physical_norms.csv", cols, tag)
    report.plot_norms(out / "norms.png", traj.times,
                      {k: np.maximum(v, 1e-300) for k, v in phys.items()}, "physical norms")
    report.plot_field(out / "final_vorticity.png", traj.physical_state(-1).rho.data,
                      f"curl u at t={traj.times[-1]:g}")
    summary = {"final": {k: float(v[-1]) for k, v in phys.items()},
               "max": {k: float(np.max(v)) for k, v in phys.items()}}
    return EXIT_OK, summary


def run_bounds(cfg: ExperimentConfig, out: Path, tag: str) -> tuple[int, dict]:
    e = cfg.experiment
    grid = cfg.grid()
    if "trajectory" in e:
        solver, spec, ou = cfg.solver(grid), cfg.forcing(grid), _noise(cfg)
        traj = TrajectoryRecord.load(e["trajectory"], solver, ou, spec)
        if traj.times[0] != float(e["tau"]) or traj.times[-1] != float(e["t_end"]):
            raise DataError("stored trajectory does not span [tau, t_end] of this config")
    else:
        traj = _simulate(cfg, out, tag)
    checks = [check_energy_bound(traj), check_enstrophy_bound(traj), check_vorticity_linf(traj)]
    lp = check_vorticity_lp(traj, traj.config.p_list)
    checks += list(lp.reports.values())
    cols = {"t": traj.times}
    for r in checks:
        cols[f"{r.name}_lhs"] = r.lhs
        cols[f"{r.name}_rhs"] = r.rhs
        cols[f"{r.name}_tol"] = r.tolerance
    report.write_csv(out / "bounds.csv", cols, tag)
    for r in checks[:3]:
        report.plot_bound(out / f"bound_{r.name}.png", r)
    summary = {"checks": {r.name: r.summary() for r in checks},
               "lp_profile": {f"{p:g}": v for p, v in lp.profile.items()},
               "violated": [r.name for r in checks if r.violated]}
    return (EXIT_VIOLATION if summary["violated"] else EXIT_OK), summary


def run_sweep(cfg: ExperimentConfig, out: Path, tag: str) -> tuple[int, dict]:
    e = cfg.experiment
    grid = cfg.grid()
    solver, spec, ou = cfg.solver(grid), cfg.forcing(grid), _noise(cfg)
    tau = float(e["tau"])
    u0 = _initial_state(cfg, grid, tau)
    _write_noise(out, ou, tag)
    nus = sorted((float(v) for v in e["nu_list"]), reverse=True)
    rep = vanishing_viscosity_sweep(u0, nus, solver, ou, spec, tau + float(e["T"]), tau)
    report.write_csv(out / "sweep.csv", {"nu": rep.nu_list, "E": rep.E, "E_over_nu": rep.E_over_nu}, tag)
    ok = np.isfinite(rep.E) & (rep.E > 0)
    slope = float(np.polyfit(np.log(rep.nu_list[ok]), np.log(rep.E[ok]), 1)[0]) if ok.sum() >= 2 else None
    report.plot_sweep(out / "sweep.png", rep.nu_list, rep.E, slope)
    summary = {"strictly_decreasing": rep.strictly_decreasing, "non_increasing": rep.non_increasing,
               "loglog_slope": slope, "failed": rep.failed}
    if any(rep.failed):
        raise BlowupError("a viscosity run blew up", summary)
    return EXIT_OK, summary


def _family(cfg: ExperimentConfig, grid):
    e = cfg.experiment
    return make_initial_family(grid, int(e["family_size"]), float(e["radius_V"]),
                               float(e["radius_curl_inf"]), seed=cfg.seed,
                               modes=int(cfg.raw["initial"]["modes"]))


def run_attractor(cfg: ExperimentConfig, out: Path, tag: str) -> tuple[int, dict]:
    e = cfg.experiment
    grid = cfg.grid()
    solver, spec, ou = cfg.solver(grid), cfg.forcing(grid), _noise(cfg)
    _write_noise(out, ou, tag)
    B = _family(cfg, grid)
    t = float(e["t"])
    est = pullback_estimate(t, ou, B, e["horizons"], solver, spec)
    est.save(out / "cloud", tag=tag)
    report.write_csv(out / "diameters.csv",
                     {"depth": est.pullback_horizons, "diam_delta": est.diameters}, tag)
    report.plot_series(out / "diameters.png", est.pullback_horizons,
                       {"diameter": np.maximum(est.diameters, 1e-300)}, "pullback depth",
                       "cloud diameter")
    summary = {"t": t, "diameters": est.diameters, "converged": est.converged,
               "noise_floor": est.noise_floor, "excluded": est.excluded}
    status = EXIT_OK
    if "t_trunc" in e:
        radii = absorbing_radii(t, ou, spec, solver.sigma, float(e["t_trunc"]))
        ab = check_absorption(est.points, radii, solver.sigma)
        summary["radii"] = {"L1": radii.L1, "L2": radii.L2, "L1_tail": radii.L1_tail,
                            "L2_tail": radii.L2_tail, "delta": radii.delta}
        summary["absorption"] = {"absorbed": ab.absorbed, "V_bound": ab.V_bound,
                                 "curl_bound": ab.curl_bound, "V_max": float(ab.V_norms.max()),
                                 "curl_max": float(ab.curl_sup.max()), "factor_V": ab.factor_V}
        if not ab.absorbed:
            status = EXIT_VIOLATION
    if est.excluded:
        raise BlowupError(f"members {est.excluded} blew up", summary)
    return status, summary


def run_autonomy(cfg: ExperimentConfig, out: Path, tag: str) -> tuple[int, dict]:
    e = cfg.experiment
    grid = cfg.grid()
    solver, spec, ou = cfg.solver(grid), cfg.forcing(grid), _noise(cfg)
    _write_noise(out, ou, tag)
    B = _family(cfg, grid)
    rep = asymptotic_autonomy_sweep(e["times"], ou, B, solver, spec, spec.as_autonomous(),
                                    horizons=e["horizons"])
    report.write_csv(out / "autonomy.csv", {"t": rep.times, "distance": rep.distances,
                                            "diam_delta": rep.diam_nonautonomous}, tag)
    report.plot_series(out / "autonomy.png", rep.times,
                       {"dist(A(t), A_inf)": np.maximum(rep.distances, 1e-300)}, "t",
                       "asymptotic autonomy")
    rep.reference.save(out / "cloud_autonomous", tag=tag)
    summary = {"times": rep.times, "distances": rep.distances, "decreasing": rep.decreasing,
               "diam_autonomous": rep.diam_autonomous, "noise_floor": rep.noise_floor}
    return EXIT_OK, summary


RUNNERS = {"simulate": run_simulate, "bounds": run_bounds, "sweep-nu": run_sweep,
           "attractor": run_attractor, "autonomy": run_autonomy}


def run(cfg: ExperimentConfig, expected: str | None = None) -> int:
    """Validate, run the experiment named in ``cfg`` and write the manifest."""
    errs = validate(cfg)
    if expected is not None and cfg.raw["experiment"].get("name") != expected:
        errs.append(f"config describes {cfg.raw['experiment'].get('name')!r}, not {expected!r}")
    if errs:
        for msg in errs:
            print(f"invalid: {msg}", file=sys.stderr)
        return EXIT_INVALID
    out, tag = cfg.output_dir, cfg.config_hash()
    start = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        try:
            status, summary = RUNNERS[cfg.name](cfg, out, tag)
        except BlowupError as exc:
            status, summary = EXIT_BLOWUP, {"error": str(exc), "diagnostics": exc.diagnostics}
            print(f"blowup: {exc}", file=sys.stderr)
        except (ParameterError, RangeError) as exc:
            status, summary = EXIT_INVALID, {"error": str(exc)}
            print(f"invalid: {exc}", file=sys.stderr)
        except DataError as exc:
            status, summary = EXIT_IO, {"error": str(exc)}
            print(f"data error: {exc}", file=sys.stderr)
        report.write_json(out / "summary.json", {"experiment": cfg.name, "status": status, **summary}, tag)
        manifest = {
            "config": cfg.raw, "config_hash": tag, "config_source": cfg.source,
            "code_version": code_version(), "wall_time_s": time.perf_counter() - start,
            "exit_status": status, "artifacts": report.numeric_digest(out),
        }
        (out / report.MANIFEST).write_text(json.dumps(report._clean(manifest), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{cfg.name}: status {status}, artifacts in {out}")
    return status


def _load(path: str) -> ExperimentConfig | int:
    try:
        return ExperimentConfig.load(path)
    except ConfigParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DataError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stocheuler", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "sweep-nu", "bounds", "attractor", "autonomy"):
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("config", help="YAML experiment file")
        p.add_argument("--output-dir", help="override output_dir")
        p.add_argument("--seed", type=int, help="override seed")
    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _load(args.config)
    if isinstance(cfg, int):
        return cfg
    if args.command == "validate":
        errs = validate(cfg)
        for msg in errs:
            print(msg)
        if not errs:
            print("valid")
        return EXIT_INVALID if errs else EXIT_OK
    cfg = cfg.with_overrides(args.output_dir, args.seed)
    return run(cfg, expected=args.command)


if __name__ == "__main__":
    sys.exit(main())
