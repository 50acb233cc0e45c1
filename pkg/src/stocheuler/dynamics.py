"""Time integration of the transformed vorticity equation.

With ``v = e^{-sigma y} u`` the vorticity ``rho = curl v`` obeys the random PDE

    d rho/dt = nu Lap rho - (sigma^2/2 - sigma y) rho - e^{sigma y} (v . grad rho)
               + e^{-sigma y} curl f,      rho = 0 on the boundary,

with ``v = grad_perp psi`` and ``-Lap psi = rho``.  Advection uses the Arakawa
Jacobian, time stepping is SSP-RK3.  Every noise-grid interval is split into
``m`` equal substeps, with ``m`` chosen from the state at the start of the
interval, so grid times are always step boundaries and restarting from any of
them reproduces the same schedule.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BlowupError, DataError, ParameterError, RangeError
from .field import (
    Grid, ScalarField, VectorField, curl, grad_perp, grad_perp_array,
    l2_array, laplacian_array, lp_array, norms, pad, random_smooth_vorticity,
    solve_poisson_array, velocity_gradient_sq,
)
from .noise import OUPath

DEFAULT_DT = 2.0 ** -7
BLOWUP_LEVEL = 1e12


# ---------------------------------------------------------------- trace constant

def _wall_trace_sq(psi: np.ndarray, h: float) -> float:
    """Squared L^2 norm on the boundary of the tangential velocity |d psi/dn|."""
    # one-sided second-order normal derivative with psi = 0 on the wall
    walls = [
        (4 * psi[0, :] - psi[1, :]),
        (4 * psi[-1, :] - psi[-2, :]),
        (4 * psi[:, 0] - psi[:, 1]),
        (4 * psi[:, -1] - psi[:, -2]),
    ]
    return float(sum(np.sum((w / (2 * h)) ** 2) for w in walls) * h)


@functools.lru_cache(maxsize=8)
def trace_constant(n: int, samples: int = 64, seed: int = 12345) -> float:
    """Empirical C_{1/2} in ||v||^2_{boundary} <= 1/2 ||v||_V^2 + C_{1/2} ||v||_H^2.

    Measures C_tr = max ||v||^2_boundary / (||v||_V ||v||_H) over random
    band-limited velocity fields; Young's inequality then gives
    C_{1/2} = C_tr^2 / 2.
    """
    grid = Grid(n)
    rng = np.random.default_rng(seed)
    best = 0.0
    for k in range(samples):
        rho = random_smooth_vorticity(grid, rng, modes=2 + k % 8, decay=1.0)
        psi = solve_poisson_array(rho.data)
        rep = norms(grad_perp(ScalarField(grid, psi)))
        best = max(best, _wall_trace_sq(psi, grid.h) / (rep.h1 * rep.l2))
    return 0.5 * best * best


def nu0(sigma: float, grid: Grid) -> float:
    """Largest admissible viscosity: sigma^2/2 - 2 nu C_{1/2} > sigma^2/4."""
    return sigma * sigma / (8.0 * trace_constant(grid.n))


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class SolverConfig:
    nu: float
    sigma: float
    grid: Grid
    dt_max: float = DEFAULT_DT
    cfl: float = 0.5
    t_span: tuple[float, float] | None = None
    record_every: int = 1
    store_every: int = 0
    p_list: tuple = (2, 4, 8, 16, 32)
    max_substeps: int = 4096
    enforce_nu0: bool = True

    def __post_init__(self):
        if self.nu < 0:
            raise ParameterError("nu must be non-negative")
        if self.sigma < 0:
            raise ParameterError("sigma must be non-negative")
        if not 0 < self.cfl < 1:
            raise ParameterError("cfl must lie in (0, 1)")
        if self.dt_max <= 0:
            raise ParameterError("dt_max must be positive")
        if self.record_every < 1 or self.store_every < 0:
            raise ParameterError("record_every >= 1 and store_every >= 0 required")
        if self.enforce_nu0 and self.nu > 0 and self.nu > nu0(self.sigma, self.grid):
            raise ParameterError(
                f"nu={self.nu} exceeds nu0={nu0(self.sigma, self.grid):.4g}: "
                "sigma^2/2 - 2 nu C_1/2 must stay above sigma^2/4")
        object.__setattr__(self, "p_list", tuple(self.p_list))

    @property
    def c_star(self) -> float:
        """Energy damping rate sigma^2/2 - 2 nu C_{1/2}."""
        return 0.5 * self.sigma ** 2 - 2.0 * self.nu * trace_constant(self.grid.n)

    def as_dict(self) -> dict:
        return {
            "nu": self.nu, "sigma": self.sigma, "n": self.grid.n, "dt_max": self.dt_max,
            "cfl": self.cfl, "t_span": list(self.t_span) if self.t_span else None,
            "record_every": self.record_every, "store_every": self.store_every,
            "p_list": list(self.p_list), "max_substeps": self.max_substeps,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- forcing

FORCING_KINDS = ("autonomous", "decaying_to_autonomous", "custom_table")


@dataclass(frozen=True)
class ForcingValue:
    f: VectorField
    curl_f: ScalarField


@dataclass(frozen=True)
class ForcingSpec:
    """Forcing family f(x, t) with autonomous limit ``f_inf``.

    ``decaying_to_autonomous`` means f(t) = f_inf (1 + e^{-rate t});
    ``custom_table`` interpolates linearly between tabulated fields.
    """

    kind: str
    f_inf: VectorField
    curl_f_inf: ScalarField
    rate: float = 0.0
    table_times: tuple = ()
    table_f: tuple = ()
    table_curl: tuple = ()

    def __post_init__(self):
        if self.kind not in FORCING_KINDS:
            raise ParameterError(f"unknown forcing kind {self.kind!r}")
        if self.kind == "decaying_to_autonomous" and not self.rate > 0:
            raise ParameterError("decaying forcing needs rate > 0")
        ref = curl(self.f_inf).data
        scale = 1.0 + float(np.abs(ref).max())
        if float(np.abs(ref - self.curl_f_inf.data).max()) > 0.05 * scale:
            raise ParameterError("curl_f_inf does not match curl(f_inf)")
        if self.kind == "custom_table":
            tt = np.asarray(self.table_times, dtype=float)
            if tt.size < 2 or np.any(np.diff(tt) <= 0):
                raise ParameterError("table times must be strictly increasing (>= 2 entries)")
            if not len(self.table_f) == len(self.table_curl) == tt.size:
                raise ParameterError("table sizes differ")

    @classmethod
    def zero(cls, grid: Grid) -> ForcingSpec:
        return cls("autonomous", VectorField.zeros(grid), ScalarField.zeros(grid))

    @classmethod
    def sine_mode(cls, grid: Grid, amplitude: float, mode=(1, 2), kind: str = "autonomous",
                  rate: float = 0.0) -> ForcingSpec:
        """f_inf = amplitude * grad_perp(phi), phi = sin(j pi x) sin(k pi y) / (pi^2 (j^2+k^2)).

        The curl of f_inf is then close to amplitude * sin(j pi x) sin(k pi y).
        """
        j, k = mode
        X, Y = grid.mesh()
        c = amplitude / (np.pi ** 2 * (j * j + k * k))
        u = c * k * np.pi * np.sin(j * np.pi * X) * np.cos(k * np.pi * Y)
        v = -c * j * np.pi * np.cos(j * np.pi * X) * np.sin(k * np.pi * Y)
        f = VectorField(grid, u, v)
        return cls(kind, f, curl(f), rate=rate)

    def as_autonomous(self) -> ForcingSpec:
        return ForcingSpec("autonomous", self.f_inf, self.curl_f_inf)

    @property
    def is_zero(self) -> bool:
        return self.kind != "custom_table" and not np.any(self.curl_f_inf.data) \
            and not np.any(self.f_inf.u) and not np.any(self.f_inf.v)

    def scale(self, t):
        """Amplitude factor of the analytic kinds (vectorized in t)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "autonomous":
            return np.ones_like(t)
        if self.kind == "decaying_to_autonomous":
            return 1.0 + np.exp(-self.rate * t)
        raise ParameterError("tabulated forcing has no scalar amplitude")

    def _table_weights(self, t: float) -> tuple[int, float]:
        tt = np.asarray(self.table_times, dtype=float)
        if not tt[0] <= t <= tt[-1]:
            raise RangeError(f"t={t} outside the forcing table [{tt[0]}, {tt[-1]}]")
        i = min(int(np.searchsorted(tt, t, side="right")) - 1, tt.size - 2)
        return i, (t - tt[i]) / (tt[i + 1] - tt[i])

    def curl_at(self, t: float) -> np.ndarray:
        if self.kind == "custom_table":
            i, w = self._table_weights(t)
            return (1 - w) * self.table_curl[i].data + w * self.table_curl[i + 1].data
        return float(self.scale(t)) * self.curl_f_inf.data

    def norm_series(self, t) -> dict:
        """||f||_{L^2}, ||curl f||_{L^2} and ||curl f||_inf at the times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind != "custom_table":
            s = self.scale(t)
            base_f = norms(self.f_inf, p_list=(2,))
            base_c = norms(self.curl_f_inf, p_list=(2,))
            return {"f_l2": s * base_f.l2, "curl_l2": s * base_c.l2, "curl_linf": s * base_c.linf}
        out = {"f_l2": [], "curl_l2": [], "curl_linf": []}
        for ti in t:
            val = forcing_eval(self, float(ti))
            rf, rc = norms(val.f, p_list=(2,)), norms(val.curl_f, p_list=(2,))
            out["f_l2"].append(rf.l2)
            out["curl_l2"].append(rc.l2)
            out["curl_linf"].append(rc.linf)
        return {k: np.array(v) for k, v in out.items()}

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.kind}|{self.rate!r}".encode())
        for a in (self.f_inf.u, self.f_inf.v, self.curl_f_inf.data):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(np.asarray(self.table_times, dtype=float).tobytes())
        for fld in self.table_curl:
            h.update(np.ascontiguousarray(fld.data).tobytes())
        return h.hexdigest()[:16]


def forcing_eval(spec: ForcingSpec, t: float) -> ForcingValue:
    if spec.kind == "custom_table":
        i, w = spec._table_weights(t)
        f0, f1 = spec.table_f[i], spec.table_f[i + 1]
        return ForcingValue(f0.scale(1 - w) + f1.scale(w),
                            ScalarField(spec.f_inf.grid, spec.curl_at(t), homogeneous=False))
    s = float(spec.scale(t))
    return ForcingValue(spec.f_inf.scale(s), spec.curl_f_inf.scale(s))


# ---------------------------------------------------------------- state

@dataclass(frozen=True)
class VorticityState:
    """(rho, psi, vel) at time t with psi = poisson_solve(rho), vel = grad_perp(psi)."""

    t: float
    rho: ScalarField
    psi: ScalarField
    vel: VectorField

    @classmethod
    def from_vorticity(cls, t: float, rho: ScalarField | np.ndarray, grid: Grid | None = None):
        if not isinstance(rho, ScalarField):
            rho = ScalarField(grid, rho)
        psi = ScalarField(rho.grid, solve_poisson_array(rho.data))
        return cls(t, rho, psi, grad_perp(psi))

    @classmethod
    def zeros(cls, grid: Grid, t: float = 0.0) -> VorticityState:
        return cls.from_vorticity(t, ScalarField.zeros(grid))

    @property
    def grid(self) -> Grid:
        return self.rho.grid

    def scaled(self, c: float, t: float | None = None) -> VorticityState:
        """Multiply the whole triple by c (the e^{+-sigma y} conversions)."""
        return VorticityState(self.t if t is None else t, self.rho.scale(c),
                              self.psi.scale(c), self.vel.scale(c))

    def is_consistent(self, tol: float = 1e-10) -> bool:
        ref = VorticityState.from_vorticity(self.t, self.rho)
        scale = 1.0 + float(np.abs(ref.psi.data).max())
        return (float(np.abs(ref.psi.data - self.psi.data).max()) <= tol * scale
                and float(np.abs(ref.vel.u - self.vel.u).max()) <= tol * scale * 1e3
                and float(np.abs(ref.vel.v - self.vel.v).max()) <= tol * scale * 1e3)


# ---------------------------------------------------------------- right-hand side

def arakawa_jacobian(psi: np.ndarray, zeta: np.ndarray, h: float) -> np.ndarray:
    """Arakawa's average of the three second-order Jacobians J(psi, zeta).

    Both fields vanish on the boundary ring, which makes the interior sums of
    zeta*J and psi*J vanish exactly.
    """
    P, Z = pad(psi), pad(zeta)

    def s(a, di, dj):
        n0, n1 = a.shape[-2], a.shape[-1]
        return a[..., 1 + di:n0 - 1 + di, 1 + dj:n1 - 1 + dj]

    p_e, p_w, p_n, p_s = s(P, 1, 0), s(P, -1, 0), s(P, 0, 1), s(P, 0, -1)
    z_e, z_w, z_n, z_s = s(Z, 1, 0), s(Z, -1, 0), s(Z, 0, 1), s(Z, 0, -1)
    p_ne, p_nw, p_se, p_sw = s(P, 1, 1), s(P, -1, 1), s(P, 1, -1), s(P, -1, -1)
    z_ne, z_nw, z_se, z_sw = s(Z, 1, 1), s(Z, -1, 1), s(Z, 1, -1), s(Z, -1, -1)

    j_pp = (p_e - p_w) * (z_n - z_s) - (p_n - p_s) * (z_e - z_w)
    j_px = (p_e * (z_ne - z_se) - p_w * (z_nw - z_sw)
            - p_n * (z_ne - z_nw) + p_s * (z_se - z_sw))
    j_xp = (z_n * (p_ne - p_nw) - z_s * (p_se - p_sw)
            - z_e * (p_ne - p_se) + z_w * (p_nw - p_sw))
    return (j_pp + j_px + j_xp) / (12.0 * h * h)


def advection_array(psi: np.ndarray, rho: np.ndarray, h: float) -> np.ndarray:
    """Arakawa discretization of v . grad rho with v = (psi_y, -psi_x)."""
    return -arakawa_jacobian(psi, rho, h)


def _rhs_array(rho, y, curl_f, sigma, nu, h):
    psi = solve_poisson_array(rho)
    out = -(0.5 * sigma * sigma - sigma * y) * rho
    out -= math.exp(sigma * y) * advection_array(psi, rho, h)
    if curl_f is not None:
        out += math.exp(-sigma * y) * curl_f
    if np.any(nu):
        out += nu * laplacian_array(rho, h)
    return out


def rhs_vorticity(state: VorticityState, y_t: float, spec: ForcingSpec,
                  cfg: SolverConfig) -> ScalarField:
    """Right side of the transformed vorticity equation at ``state``."""
    curl_f = None if spec.is_zero else spec.curl_at(state.t)
    out = _rhs_array(state.rho.data, y_t, curl_f, cfg.sigma, cfg.nu, cfg.grid.h)
    if not np.all(np.isfinite(out)):
        raise BlowupError("non-finite right-hand side", _diagnostics(state.rho.data, cfg.grid.h))
    return ScalarField(cfg.grid, out)


def _ssp_rk3(rho, dt, ys, fs, sigma, nu, h):
    k1 = rho + dt * _rhs_array(rho, ys[0], fs[0], sigma, nu, h)
    k2 = 0.75 * rho + 0.25 * (k1 + dt * _rhs_array(k1, ys[1], fs[1], sigma, nu, h))
    return rho / 3.0 + (2.0 / 3.0) * (k2 + dt * _rhs_array(k2, ys[2], fs[2], sigma, nu, h))


def _diagnostics(rho: np.ndarray, h: float) -> dict:
    finite = np.isfinite(rho)
    r = np.where(finite, rho, 0.0)
    return {"rho_linf": float(np.abs(r).max()), "rho_l2": float(l2_array(r, h).max()),
            "nonfinite": int((~finite).sum())}


def _speed(rho: np.ndarray, h: float) -> np.ndarray:
    u, v = grad_perp_array(solve_poisson_array(rho), h)
    return np.sqrt(u * u + v * v).max(axis=(-2, -1))


def stable_dt(rho: np.ndarray, y: float, cfg: SolverConfig, nu_max: float | None = None) -> float:
    """min(dt_max, cfl h / max|e^{sigma y} v|, cfl h^2 / (4 nu))."""
    h = cfg.grid.h
    nu_max = cfg.nu if nu_max is None else nu_max
    dt = cfg.dt_max
    speed = float(np.max(_speed(rho, h))) * math.exp(cfg.sigma * y)
    if speed > 0:
        dt = min(dt, cfg.cfl * h / speed)
    if nu_max > 0:
        dt = min(dt, cfg.cfl * h * h / (4.0 * nu_max))
    return dt


def step(state: VorticityState, ou: OUPath, spec: ForcingSpec, cfg: SolverConfig,
         dt: float | None = None) -> VorticityState:
    """One SSP-RK3 step, never crossing the next noise-grid time."""
    t = state.t
    if dt is None:
        dt = stable_dt(state.rho.data, ou.at(t), cfg)
        k_next = math.floor(t / ou.dt + 1e-9) + 1
        dt = min(dt, k_next * ou.dt - t)
    if dt < 1e-14:
        raise BlowupError("step size underflow", _diagnostics(state.rho.data, cfg.grid.h))
    ts = (t, t + dt, t + 0.5 * dt)
    ys = tuple(ou.at(s) for s in ts)
    fs = (None,) * 3 if spec.is_zero else tuple(spec.curl_at(s) for s in ts)
    rho = _ssp_rk3(state.rho.data, dt, ys, fs, cfg.sigma, cfg.nu, cfg.grid.h)
    if not np.all(np.isfinite(rho)):
        raise BlowupError("non-finite state after step", _diagnostics(rho, cfg.grid.h))
    return VorticityState.from_vorticity(t + dt, ScalarField(cfg.grid, rho))


# ---------------------------------------------------------------- trajectories

NORM_KEYS = ("rho_l2", "rho_linf", "energy", "v_l2", "v_V")


def _lp_key(p) -> str:
    return f"rho_lp{p:g}"


def batch_norms(rho: np.ndarray, h: float, p_list) -> dict:
    """Transformed-variable norms of a batch of vorticity fields."""
    psi = solve_poisson_array(rho)
    u, v = grad_perp_array(psi, h)
    arho = np.abs(rho)
    v_l2 = l2_array(np.hypot(u, v), h)
    out = {
        "rho_l2": l2_array(rho, h),
        "rho_linf": arho.max(axis=(-2, -1)),
        "energy": np.sum(psi * rho, axis=(-2, -1)) * h * h,
        "v_l2": v_l2,
        "v_V": np.sqrt(v_l2 ** 2 + np.sum(velocity_gradient_sq(u, v, h), axis=(-2, -1)) * h * h),
    }
    for p in p_list:
        out[_lp_key(p)] = out["rho_l2"] if p == 2 else lp_array(arho, h, p)
    return out


@dataclass
class TrajectoryRecord:
    """Samples of one transformed trajectory at noise-grid times.

    ``norms`` always covers every recorded time; ``states`` holds a
    VorticityState at stored indices and None where thinning dropped it.
    """

    times: np.ndarray
    y: np.ndarray
    norms: dict
    states: list
    config: SolverConfig
    ou: OUPath | None = field(default=None, repr=False)
    spec: ForcingSpec | None = field(default=None, repr=False)
    nu: float = 0.0
    failed: bool = False
    failure: str | None = None

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise DataError("trajectory times must be strictly increasing")

    @property
    def tau(self) -> float:
        return float(self.times[0])

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def stored_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.states) if s is not None]

    @property
    def final_state(self) -> VorticityState:
        return self.states[-1]

    def physical_state(self, i: int) -> VorticityState:
        st = self.states[i]
        if st is None:
            raise DataError(f"state {i} was thinned away")
        return st.scaled(math.exp(self.config.sigma * self.y[i]))

    def physical(self, key: str) -> np.ndarray:
        """Physical-variable version of a norm series (u = e^{sigma y} v)."""
        f = np.exp(self.config.sigma * self.y)
        if key in ("energy",):
            return self.norms[key] * f * f
        return self.norms[key] * f

    def save(self, directory: str | Path, tag: str | None = None) -> None:
        """Write ``norms.csv``, ``states.npy``, ``stored.npy`` and ``meta.json``.

        ``tag`` replaces the solver hash in the file headers (experiment hash).
        """
        tag = tag or self.config_hash
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        keys = sorted(self.norms)
        cols = np.column_stack([self.times, self.y] + [self.norms[k] for k in keys])
        np.savetxt(d / "norms.csv", cols, fmt="%.17g", delimiter=",",
                   header=f"config_hash={tag}\n" + ",".join(["t", "y"] + keys))
        idx = self.stored_indices()
        np.save(d / "stored.npy", np.array(idx, dtype=np.int64))
        np.save(d / "states.npy", np.stack([self.states[i].rho.data for i in idx]))
        meta = {"config": self.config.as_dict(), "config_hash": tag, "solver_hash": self.config_hash,
                "nu": self.nu, "failed": self.failed, "failure": self.failure}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, config: SolverConfig, ou: OUPath | None = None,
             spec: ForcingSpec | None = None) -> TrajectoryRecord:
        d = Path(directory)
        try:
            meta = json.loads((d / "meta.json").read_text())
            with open(d / "norms.csv") as fh:
                fh.readline()
                names = fh.readline().lstrip("# ").strip().split(",")
            data = np.loadtxt(d / "norms.csv", delimiter=",", comments="#", ndmin=2)
            idx = np.load(d / "stored.npy")
            rho = np.load(d / "states.npy")
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load trajectory from {d}: {exc}") from exc
        if meta.get("solver_hash", meta.get("config_hash")) != config.config_hash():
            raise DataError("stored trajectory was produced with a different solver config")
        times = data[:, 0]
        states = [None] * times.size
        for i, r in zip(idx, rho):
            states[int(i)] = VorticityState.from_vorticity(float(times[i]), r, config.grid)
        norms_ = {k: data[:, j] for j, k in enumerate(names) if k not in ("t", "y")}
        return cls(times, data[:, 1], norms_, states, config, ou, spec,
                   nu=meta["nu"], failed=meta["failed"], failure=meta["failure"])


def _integrate(rho0: np.ndarray, i0: int, i1: int, ou: OUPath, spec: ForcingSpec,
               cfg: SolverConfig, nu: np.ndarray):
    """Advance a batch from grid index i0 to i1 (indices into ``ou.values``).

    Returns (times, y, norm histories, stored states, alive mask, failure notes).
    """
    h, sigma, dtn = cfg.grid.h, cfg.sigma, ou.dt
    yv = ou.values
    batch = rho0.shape[0]
    nu_b = nu.reshape(batch, 1, 1) if np.any(nu) else 0.0
    nu_max = float(np.max(nu)) if batch else 0.0
    forced = not spec.is_zero
    rho = np.array(rho0, dtype=float)
    alive = np.ones(batch, dtype=bool)
    notes: dict[int, str] = {}

    rec_idx = list(range(i0, i1 + 1, cfg.record_every))
    if rec_idx[-1] != i1:
        rec_idx.append(i1)
    rec_set = set(rec_idx)
    store_set = {i0, i1}
    if cfg.store_every:
        store_set.update(rec_idx[::cfg.store_every])
    hist: dict[str, list] = {}
    stored: dict[int, np.ndarray] = {}

    def record(i):
        vals = batch_norms(rho, h, cfg.p_list)
        for k, v in vals.items():
            hist.setdefault(k, []).append(np.where(alive, v, np.nan))
        if i in store_set:
            stored[i] = rho.copy()

    record(i0)
    for i in range(i0, i1):
        ya, yb = float(yv[i]), float(yv[i + 1])
        speed = _speed(rho, h)
        speed = np.where(alive, speed, 0.0) * math.exp(sigma * max(ya, yb))
        dt = cfg.dt_max
        smax = float(speed.max()) if batch else 0.0
        if smax > 0:
            dt = min(dt, cfg.cfl * h / smax)
        if nu_max > 0:
            dt = min(dt, cfg.cfl * h * h / (4.0 * nu_max))
        m = max(1, math.ceil(dtn / dt - 1e-9))
        if m > cfg.max_substeps:
            too_fast = speed * dtn > cfg.max_substeps * cfg.cfl * h
            for b in np.flatnonzero(too_fast & alive):
                notes[int(b)] = f"step size underflow near t={(ou.start + i) * dtn:g}"
            alive &= ~too_fast
            rho[~alive] = 0.0
            m = cfg.max_substeps
        sub = dtn / m
        for j in range(m):
            th = (j / m, (j + 1) / m, (j + 0.5) / m)
            ys = tuple(ya + c * (yb - ya) for c in th)
            fs = tuple(spec.curl_at((ou.start + i + c) * dtn) for c in th) if forced else (None,) * 3
            rho = _ssp_rk3(rho, sub, ys, fs, sigma, nu_b, h)
        bad = ~np.isfinite(rho).all(axis=(-2, -1)) | (np.abs(np.nan_to_num(rho, nan=np.inf)).max(axis=(-2, -1)) > BLOWUP_LEVEL)
        for b in np.flatnonzero(bad & alive):
            notes[int(b)] = f"non-finite or runaway vorticity near t={(ou.start + i + 1) * dtn:g}"
        alive &= ~bad
        rho[~alive] = 0.0
        if i + 1 in rec_set:
            record(i + 1)

    times = (ou.start + np.array(rec_idx)) * dtn
    return times, yv[rec_idx], {k: np.array(v) for k, v in hist.items()}, stored, alive, notes, rec_idx


def evolve_ensemble(members, tau: float, t_end: float, ou: OUPath, spec: ForcingSpec,
                    cfg: SolverConfig, nu=None, transformed: bool = False) -> list[TrajectoryRecord]:
    """Evolve several initial states together along the same noise path.

    ``members`` are physical-variable states unless ``transformed`` is set.
    ``nu`` optionally gives one viscosity per member (defaults to cfg.nu).
    Members share the step schedule; a failing member is flagged and frozen
    at zero while the others continue.
    """
    if tau > t_end:
        raise ParameterError("need tau <= t_end")
    i0, i1 = ou.index_of(tau), ou.index_of(t_end)
    members = list(members)
    if not members:
        raise ParameterError("empty ensemble")
    nus = np.full(len(members), cfg.nu, dtype=float) if nu is None else np.asarray(nu, dtype=float)
    if nus.shape != (len(members),):
        raise ParameterError("one viscosity per member expected")
    if np.any(nus < 0):
        raise ParameterError("viscosities must be non-negative")
    factor = 1.0 if transformed else math.exp(-cfg.sigma * ou.values[i0])
    rho0 = np.stack([m.rho.data for m in members]) * factor
    times, ys, hist, stored, alive, notes, rec_idx = _integrate(rho0, i0, i1, ou, spec, cfg, nus)
    out = []
    for b in range(len(members)):
        states = [None] * len(rec_idx)
        for pos, i in enumerate(rec_idx):
            if i in stored and alive[b]:
                states[pos] = VorticityState.from_vorticity(float(times[pos]), stored[i][b], cfg.grid)
        out.append(TrajectoryRecord(
            times=times, y=np.array(ys), norms={k: v[:, b] for k, v in hist.items()},
            states=states, config=cfg, ou=ou, spec=spec, nu=float(nus[b]),
            failed=not alive[b], failure=notes.get(b)))
    return out


def evolve(u_tau: VorticityState, tau: float, t_end: float, ou: OUPath, spec: ForcingSpec,
           cfg: SolverConfig, transformed: bool = False) -> TrajectoryRecord:
    """S(t, tau, omega) u_tau sampled on the noise grid between tau and t_end.

    ``u_tau`` is in physical variables unless ``transformed`` is set, in which
    case it is taken as v_tau directly (used for exact restarts).
    """
    rec = evolve_ensemble([u_tau], tau, t_end, ou, spec, cfg, transformed=transformed)[0]
    if rec.failed:
        last = {k: float(v[np.isfinite(v)][-1]) if np.isfinite(v).any() else float("nan")
                for k, v in rec.norms.items()}
        raise BlowupError(rec.failure or "blowup", last)
    return rec
