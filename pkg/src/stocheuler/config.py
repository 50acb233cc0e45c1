"""YAML experiment configuration: parsing, validation and object construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .dynamics import DEFAULT_DT, ForcingSpec, SolverConfig, nu0
from .errors import DataError, ParameterError
from .field import Grid

SCHEMA_VERSION = 1
EXPERIMENTS = ("simulate", "sweep-nu", "bounds", "attractor", "autonomy")
FORCING_KINDS = ("zero", "autonomous", "decaying_to_autonomous")
INITIAL_KINDS = ("zero", "random")
_GRID_TOL = 1e-9

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "grid": {"n": 64},
    "solver": {"nu": 0.0, "sigma": 1.0, "dt_max": DEFAULT_DT, "cfl": 0.5,
               "record_every": 1, "store_every": 0, "p_list": [2, 4, 8, 16, 32]},
    "noise": {"t_min": -10.0, "t_max": 10.0, "dt": 2.0 ** -5},
    "forcing": {"kind": "zero", "amplitude": 0.0, "mode": [1, 2], "rate": 0.0},
    "initial": {"kind": "random", "modes": 8, "curl_inf": 1.0},
    "experiment": {"name": "simulate"},
    "output_dir": "out",
}


class ConfigParseError(DataError):
    """The configuration file is not valid YAML or not a mapping."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + loc)
        self.line, self.column = line, column


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed experiment file with defaults filled in.

    ``raw`` keeps the merged mapping; every accessor reads from it so the
    echoed config in the manifest is exactly what ran.
    """

    raw: dict
    source: str | None = None

    @classmethod
    def from_dict(cls, data: dict, source: str | None = None) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigParseError("config must be a mapping at the top level")
        return cls(_merge(DEFAULTS, data), source)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigParseError(f"cannot parse {path}: {getattr(exc, 'problem', exc)}",
                                   mark.line + 1 if mark else None,
                                   mark.column + 1 if mark else None) from exc
        return cls.from_dict(data if data is not None else {}, str(path))

    def with_overrides(self, output_dir: str | None = None, seed: int | None = None) -> ExperimentConfig:
        raw = copy.deepcopy(self.raw)
        if output_dir is not None:
            raw["output_dir"] = str(output_dir)
        if seed is not None:
            raw["seed"] = int(seed)
        return ExperimentConfig(raw, self.source)

    @property
    def name(self) -> str:
        return self.raw["experiment"]["name"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def experiment(self) -> dict:
        return self.raw["experiment"]

    def numeric_dict(self) -> dict:
        """Everything that influences numbers (output_dir excluded)."""
        return {k: v for k, v in self.raw.items() if k != "output_dir"}

    def config_hash(self) -> str:
        blob = json.dumps(self.numeric_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # ------------------------------------------------------------ builders

    def grid(self) -> Grid:
        return Grid(int(self.raw["grid"]["n"]))

    def solver(self, grid: Grid | None = None) -> SolverConfig:
        s = self.raw["solver"]
        return SolverConfig(nu=float(s["nu"]), sigma=float(s["sigma"]), grid=grid or self.grid(),
                            dt_max=float(s["dt_max"]), cfl=float(s["cfl"]),
                            record_every=int(s["record_every"]), store_every=int(s["store_every"]),
                            p_list=tuple(s["p_list"]))

    def forcing(self, grid: Grid | None = None) -> ForcingSpec:
        f = self.raw["forcing"]
        grid = grid or self.grid()
        if f["kind"] == "zero" or float(f["amplitude"]) == 0.0:
            return ForcingSpec.zero(grid)
        return ForcingSpec.sine_mode(grid, float(f["amplitude"]), tuple(f["mode"]),
                                     kind=f["kind"], rate=float(f.get("rate", 0.0)))


def _on_grid(t: float, dt: float) -> bool:
    return abs(round(t / dt) * dt - t) <= _GRID_TOL * max(1.0, abs(t))


def _num(d: dict, key: str, errs: list, where: str, positive=False, nonneg=False):
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        errs.append(f"{where}.{key}: expected a number, got {v!r}")
        return None
    if positive and not v > 0:
        errs.append(f"{where}.{key}: must be positive")
    if nonneg and v < 0:
        errs.append(f"{where}.{key}: must be non-negative")
    return float(v)


def validate(cfg: ExperimentConfig) -> list[str]:
    """All violations of the schema and cross-field constraints; empty means valid.

    Never runs a simulation.  The only numerical work is the cached grid
    calibration behind nu0.
    """
    r, errs = cfg.raw, []
    if r.get("schema_version") != SCHEMA_VERSION:
        errs.append(f"schema_version: expected {SCHEMA_VERSION}, got {r.get('schema_version')!r}")
    if isinstance(r.get("seed"), bool) or not isinstance(r.get("seed"), int) or r["seed"] < 0:
        errs.append("seed: expected a non-negative integer")
    unknown = set(r) - set(DEFAULTS)
    if unknown:
        errs.append(f"unknown top-level keys: {sorted(unknown)}")

    n = r["grid"].get("n")
    if isinstance(n, bool) or not isinstance(n, int) or n < 4:
        errs.append("grid.n: expected an integer >= 4")
        n = None

    s = r["solver"]
    nu = _num(s, "nu", errs, "solver", nonneg=True)
    sigma = _num(s, "sigma", errs, "solver", nonneg=True)
    _num(s, "dt_max", errs, "solver", positive=True)
    cfl = _num(s, "cfl", errs, "solver", positive=True)
    if cfl is not None and cfl >= 1:
        errs.append("solver.cfl: must be below 1")
    for key in ("record_every", "store_every"):
        v = s.get(key)
        if isinstance(v, bool) or not isinstance(v, int) or v < (1 if key == "record_every" else 0):
            errs.append(f"solver.{key}: bad value {v!r}")
    if not isinstance(s.get("p_list"), list) or not all(
            isinstance(p, (int, float)) and 2 <= p <= 64 for p in s["p_list"]):
        errs.append("solver.p_list: expected numbers in [2, 64]")
    if n is not None and nu is not None and sigma is not None and nu > 0:
        limit = nu0(sigma, Grid(n))
        if nu > limit:
            errs.append(f"solver.nu: {nu} exceeds nu0={limit:.4g}; the energy damping "
                        "sigma^2/2 - 2 nu C_1/2 must stay positive (above sigma^2/4)")

    z = r["noise"]
    t_min = _num(z, "t_min", errs, "noise")
    t_max = _num(z, "t_max", errs, "noise")
    dtn = _num(z, "dt", errs, "noise", positive=True)
    window_ok = None not in (t_min, t_max, dtn) and dtn > 0
    if window_ok:
        if not t_min <= 0 <= t_max:
            errs.append("noise: window [t_min, t_max] must contain 0")
            window_ok = False
        for key, v in (("t_min", t_min), ("t_max", t_max)):
            if not _on_grid(v, dtn):
                errs.append(f"noise.{key}: not a multiple of noise.dt")

    f = r["forcing"]
    if f.get("kind") not in FORCING_KINDS:
        errs.append(f"forcing.kind: expected one of {FORCING_KINDS}")
    _num(f, "amplitude", errs, "forcing", nonneg=True)
    if not (isinstance(f.get("mode"), list) and len(f["mode"]) == 2
            and all(isinstance(m, int) and m >= 1 for m in f["mode"])):
        errs.append("forcing.mode: expected two positive integers")
    if f.get("kind") == "decaying_to_autonomous":
        rate = _num(f, "rate", errs, "forcing")
        if rate is not None and rate <= 0:
            errs.append("forcing.rate: decaying forcing needs rate > 0")

    ini = r["initial"]
    if ini.get("kind") not in INITIAL_KINDS:
        errs.append(f"initial.kind: expected one of {INITIAL_KINDS}")
    if ini.get("kind") == "random":
        _num(ini, "curl_inf", errs, "initial", nonneg=True)
        m = ini.get("modes")
        if isinstance(m, bool) or not isinstance(m, int) or m < 1:
            errs.append("initial.modes: expected a positive integer")

    if not isinstance(r.get("output_dir"), str) or not r["output_dir"]:
        errs.append("output_dir: expected a non-empty path")

    e = r["experiment"]
    name = e.get("name")
    if name not in EXPERIMENTS:
        errs.append(f"experiment.name: expected one of {EXPERIMENTS}")
        return errs

    def need_times(*keys):
        out = []
        for k in keys:
            v = _num(e, k, errs, "experiment")
            out.append(v)
            if v is not None and window_ok:
                if not t_min - 1e-12 <= v <= t_max + 1e-12:
                    errs.append(f"experiment.{k}={v} lies outside the noise window")
                elif not _on_grid(v, dtn):
                    errs.append(f"experiment.{k}={v} is not on the noise grid")
        return out

    if name in ("simulate", "bounds"):
        if name == "bounds" and "trajectory" in e:
            if not isinstance(e["trajectory"], str):
                errs.append("experiment.trajectory: expected a path")
        tau, t_end = need_times("tau", "t_end")
        if tau is not None and t_end is not None and t_end < tau:
            errs.append("experiment: t_end must not precede tau")
    elif name == "sweep-nu":
        tau, T = need_times("tau")[0], _num(e, "T", errs, "experiment", positive=True)
        if tau is not None and T is not None and window_ok and tau + T > t_max + 1e-12:
            errs.append("experiment: tau + T exceeds the noise window")
        nus = e.get("nu_list")
        if not isinstance(nus, list) or not nus or not all(
                isinstance(v, (int, float)) and v > 0 for v in nus):
            errs.append("experiment.nu_list: expected a non-empty list of positive viscosities")
        elif n is not None and sigma is not None and max(nus) > nu0(sigma, Grid(n)):
            errs.append(f"experiment.nu_list: {max(nus)} exceeds nu0={nu0(sigma, Grid(n)):.4g}")
    else:
        hs = e.get("horizons")
        if not isinstance(hs, list) or not hs or not all(
                isinstance(v, (int, float)) and v > 0 for v in hs) or \
                any(b <= a for a, b in zip(hs, hs[1:])):
            errs.append("experiment.horizons: expected an increasing list of positive depths")
            hs = None
        for key in ("radius_V", "radius_curl_inf"):
            _num(e, key, errs, "experiment", positive=True)
        size = e.get("family_size")
        if isinstance(size, bool) or not isinstance(size, int) or size < 1:
            errs.append("experiment.family_size: expected a positive integer")
        if name == "attractor":
            (t,) = need_times("t")
            if "t_trunc" in e:
                tt = _num(e, "t_trunc", errs, "experiment", positive=True)
                if tt is not None and t is not None and window_ok and t - tt < t_min - 1e-12:
                    errs.append("experiment.t_trunc: truncation window leaves the noise window")
            if hs and t is not None and window_ok and t - hs[-1] < t_min - 1e-12:
                errs.append(f"experiment.horizons: pullback to {t - hs[-1]} leaves the noise window")
            if sigma is not None and sigma == 0 and "t_trunc" in e:
                errs.append("solver.sigma: absorbing radii need sigma > 0")
        else:
            ts = e.get("times")
            if not isinstance(ts, list) or not ts or not all(isinstance(v, (int, float)) for v in ts) \
                    or any(b <= a for a, b in zip(ts, ts[1:])):
                errs.append("experiment.times: expected an increasing list of times")
            elif window_ok:
                # clouds at t run along theta_{-t} omega, whose window is shifted by +t
                if hs and -hs[-1] < t_min - 1e-12:
                    errs.append(f"experiment.horizons: depth {hs[-1]} leaves the noise window")
                for t in ts:
                    if not t_min <= -t <= t_max:
                        errs.append(f"experiment.times: shift by {-t} leaves the noise window")
                    if not _on_grid(float(t), dtn):
                        errs.append(f"experiment.times: {t} is not on the noise grid")
            if f.get("kind") != "decaying_to_autonomous":
                errs.append("forcing.kind: autonomy needs decaying_to_autonomous forcing")
    return errs


def check(cfg: ExperimentConfig) -> None:
    """Raise ParameterError listing every violation."""
    errs = validate(cfg)
    if errs:
        raise ParameterError("; ".join(errs))
