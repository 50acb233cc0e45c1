"""Checks of the a-priori estimates along computed trajectories.

All right-hand sides are built from the same OU samples that drove the run.
Exponents are integrated with the trapezoid rule on the noise grid (exact for
the piecewise-linear path the integrator sees) and the Duhamel integrals by a
running trapezoid recursion.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ForcingSpec, SolverConfig, TrajectoryRecord, VorticityState, evolve_ensemble, nu0,
    trace_constant,
)
from .errors import DataError, ParameterError
from .field import (
    Grid, curl_array, grad_perp_array, l2_array, lp_array,
    random_smooth_vorticity, solve_poisson_array, velocity_gradient_sq,
)
from .noise import OUPath

LINF_REL_TOL = 0.02
# calibrated bounds carry no slack beyond floating-point rounding
ROUNDING = 1e-12
ENSTROPHY_REL_TOL = 0.02


@dataclass
class BoundCheckReport:
    name: str
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    tolerance: np.ndarray
    constants: dict = field(default_factory=dict)

    @property
    def margin(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def violated(self) -> bool:
        return bool(np.any(self.margin < -self.tolerance))

    @property
    def worst_margin(self) -> float:
        return float(np.min(self.margin))

    @property
    def worst_relative_excess(self) -> float:
        """max (lhs - rhs)/rhs over samples with rhs > 0 (negative means slack)."""
        ok = self.rhs > 0
        if not ok.any():
            return 0.0 if np.all(self.lhs <= 0) else math.inf
        return float(np.max((self.lhs[ok] - self.rhs[ok]) / self.rhs[ok]))

    def summary(self) -> dict:
        return {"name": self.name, "worst_margin": self.worst_margin,
                "worst_relative_excess": self.worst_relative_excess,
                "violated": self.violated, "samples": int(self.times.size),
                "constants": self.constants}


# ---------------------------------------------------------------- helpers

def duhamel(rate: np.ndarray, source: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Solve B' = rate B + source, B(0)=0 on a grid by exact-exponent trapezoid.

    Returns (G, B) with G_k = exp(int_0^{t_k} rate) and
    B_k ~ int_0^{t_k} exp(int_xi^{t_k} rate) source(xi) d xi.
    """
    n = rate.size
    g = np.ones(n)
    b = np.zeros(n)
    inc = 0.5 * dt * (rate[1:] + rate[:-1])
    for k in range(n - 1):
        e = math.exp(inc[k])
        g[k + 1] = g[k] * e
        b[k + 1] = b[k] * e + 0.5 * dt * (e * source[k] + source[k + 1])
    return g, b


def _grid_view(traj: TrajectoryRecord):
    """OU samples on the full noise grid from tau to t_end, and the positions of the records."""
    ou = traj.ou
    if ou is None:
        raise DataError("trajectory carries no noise path")
    if traj.times.size == 0:
        raise DataError("trajectory has no samples")
    i0, i1 = ou.index_of(traj.times[0]), ou.index_of(traj.times[-1])
    y = ou.values[i0:i1 + 1]
    t = (ou.start + np.arange(i0, i1 + 1)) * ou.dt
    pos = np.array([ou.index_of(s) - i0 for s in traj.times])
    return t, y, pos


def _forcing_norms(spec: ForcingSpec | None, t: np.ndarray, grid: Grid, p_list=()) -> dict:
    if spec is None:
        raise DataError("trajectory carries no forcing description")
    out = spec.norm_series(t)
    for p in p_list:
        if spec.kind == "custom_table":
            out[p] = np.array([float(lp_array(np.abs(spec.curl_at(float(s))), grid.h, p)) for s in t])
        else:
            out[p] = spec.scale(t) * float(lp_array(np.abs(spec.curl_f_inf.data), grid.h, p))
    return out


def _require_norms(traj: TrajectoryRecord, keys) -> None:
    missing = [k for k in keys if k not in traj.norms]
    if missing:
        raise DataError(f"trajectory lacks norm histories {missing}")


# ---------------------------------------------------------------- constants

@functools.lru_cache(maxsize=8)
def energy_calibration(n: int, samples: int = 48, seed: int = 271828) -> dict:
    """Calibrate the constant C of the V-norm energy bound on grid n.

    The bound is proved for E_h + Z = (psi, rho)_h + ||rho||^2, which the
    scheme controls exactly.  Three grid ratios over random band-limited
    fields convert it to the V-norm:
      c_a = max ||v||_V^2 / (E_h + Z),  c_b = max (E_h + Z) / ||v||_V^2,
      c_f = max (psi, curl f)_h^2 / (E_h ||f||^2),
    and C = c_a * max(c_b, c_f, 1).
    """
    grid = Grid(n)
    h = grid.h
    rng = np.random.default_rng(seed)
    c_a = c_b = c_f = 0.0
    for k in range(samples):
        rho = random_smooth_vorticity(grid, rng, modes=2 + k % 10, decay=1.0).data
        psi = solve_poisson_array(rho)
        u, v = grad_perp_array(psi, h)
        v2 = float(l2_array(np.hypot(u, v), h)) ** 2
        vv = v2 + float(np.sum(velocity_gradient_sq(u, v, h))) * h * h
        e = float(np.sum(psi * rho)) * h * h
        z = float(l2_array(rho, h)) ** 2
        c_a = max(c_a, vv / (e + z))
        c_b = max(c_b, (e + z) / vv)
        # forcing-side pairing against an independent smooth field
        phi = random_smooth_vorticity(grid, rng, modes=2 + k % 6, decay=2.0).data
        fu, fv = grad_perp_array(phi, h)
        cf = curl_array(fu, fv, h)
        ff = float(l2_array(np.hypot(fu, fv), h)) ** 2
        pair = float(np.sum(psi * cf)) * h * h
        c_f = max(c_f, pair * pair / (e * ff))
    return {"C": c_a * max(c_b, c_f, 1.0), "c_a": c_a, "c_b": c_b, "c_f": c_f,
            "samples": samples, "seed": seed, "n": n}


def energy_constant(n: int) -> float:
    return energy_calibration(n)["C"]


# ---------------------------------------------------------------- energy bounds

def check_energy_bound(traj: TrajectoryRecord, C: float | None = None) -> BoundCheckReport:
    """||u(t)||_V^2 against the calibrated Gronwall bound.

    rhs = C e^{2 sigma y_t} [ ||v_tau||_V^2 G(t) + (2/sigma^2) int G(t)/G(xi)
          e^{-2 sigma y_xi} (||f||^2 + ||curl f||^2) d xi ],
    G the exponential of int (-C* + 2 sigma y), C* = sigma^2/2 - 2 nu C_{1/2}.
    """
    _require_norms(traj, ("v_V",))
    cfg = traj.config
    sig = cfg.sigma
    cal = energy_calibration(cfg.grid.n)
    C = cal["C"] if C is None else C
    t, y, pos = _grid_view(traj)
    c_star = 0.5 * sig * sig - 2.0 * traj.nu * trace_constant(cfg.grid.n)
    fn = _forcing_norms(traj.spec, t, cfg.grid)
    src = np.exp(-2.0 * sig * y) * (fn["f_l2"] ** 2 + fn["curl_l2"] ** 2)
    if not np.any(src):
        weight = 0.0
    else:
        weight = 2.0 / (sig * sig) if sig > 0 else math.inf
    g, b = duhamel(-c_star + 2.0 * sig * y, src, traj.ou.dt)
    v0 = traj.norms["v_V"][0]
    rhs_grid = C * np.exp(2.0 * sig * y) * (v0 * v0 * g + (weight * b if weight else 0.0))
    lhs = traj.physical("v_V") ** 2
    rhs = rhs_grid[pos]
    return BoundCheckReport("energy_V", traj.times.copy(), lhs, rhs, ROUNDING * rhs,
                            {"C": C, "c_star": c_star, "calibration": cal})


def check_enstrophy_bound(traj: TrajectoryRecord, rel_tol: float = ENSTROPHY_REL_TOL) -> BoundCheckReport:
    """Constant-free enstrophy Gronwall bound in transformed variables.

    ||rho(t)||^2 <= ||rho_tau||^2 G(t) + (2/sigma^2) int G(t)/G(xi) e^{-2 sigma y} ||curl f||^2,
    G the exponential of int (-sigma^2/2 + 2 sigma y).
    """
    _require_norms(traj, ("rho_l2",))
    sig = traj.config.sigma
    t, y, pos = _grid_view(traj)
    fn = _forcing_norms(traj.spec, t, traj.config.grid)
    src = np.exp(-2.0 * sig * y) * fn["curl_l2"] ** 2
    weight = 0.0 if not np.any(src) else (2.0 / (sig * sig) if sig > 0 else math.inf)
    g, b = duhamel(-0.5 * sig * sig + 2.0 * sig * y, src, traj.ou.dt)
    z0 = traj.norms["rho_l2"][0] ** 2
    rhs = (z0 * g + (weight * b if weight else 0.0))[pos]
    lhs = traj.norms["rho_l2"] ** 2
    return BoundCheckReport("enstrophy", traj.times.copy(), lhs, rhs, rel_tol * rhs, {})


# ---------------------------------------------------------------- vorticity bounds

def linf_bound_series(traj: TrajectoryRecord, y_weight: float = 1.0) -> np.ndarray:
    """Maximum-principle bound on ||curl u(t)||_inf at the recorded times.

    e^{sigma y_t} [ ||rho_tau||_inf G(t) + int G(t)/G(xi) e^{-sigma y_xi} ||curl f(xi)||_inf d xi ]
    with G the exponential of int (-sigma^2/2 + y_weight sigma y).  The linear
    coefficient of the transformed vorticity equation is -sigma^2/2 + sigma y,
    so y_weight = 1 is the sharp maximum principle.
    """
    sig = traj.config.sigma
    t, y, pos = _grid_view(traj)
    fn = _forcing_norms(traj.spec, t, traj.config.grid)
    src = np.exp(-sig * y) * fn["curl_linf"]
    g, b = duhamel(-0.5 * sig * sig + y_weight * sig * y, src, traj.ou.dt)
    r0 = traj.norms["rho_linf"][0]
    return (np.exp(sig * y) * (r0 * g + b))[pos]


def check_vorticity_linf(traj: TrajectoryRecord, y_weight: float = 1.0,
                         rel_tol: float = LINF_REL_TOL, h2_coef: float = 1.0) -> BoundCheckReport:
    """max |curl u(t)| against the constant-free maximum-principle bound.

    Tolerance per sample is (rel_tol + h2_coef h^2) * rhs to absorb Arakawa
    over/undershoot.
    """
    _require_norms(traj, ("rho_linf",))
    rhs = linf_bound_series(traj, y_weight)
    lhs = traj.physical("rho_linf")
    h = traj.config.grid.h
    tol = (rel_tol + h2_coef * h * h) * rhs
    return BoundCheckReport("vorticity_linf", traj.times.copy(), lhs, rhs, tol,
                            {"y_weight": y_weight, "rel_tol": rel_tol, "h2_coef": h2_coef})


@dataclass
class LpBoundReport:
    reports: dict
    profile: dict
    young_constant: dict

    @property
    def violated(self) -> bool:
        return any(r.violated for r in self.reports.values())


def check_vorticity_lp(traj: TrajectoryRecord, p_list=(2, 4, 8, 16, 32)) -> LpBoundReport:
    """L^p vorticity Gronwall bound for each p.

    ||rho(t)||_p <= p^{1/p} [ (1/p) ||rho_tau||_p^p + K int e^{-p sigma y} ||curl f||_p^p ]^{1/p}
                    * exp int (1 + sigma |y|),
    with K = 1/p from Young's inequality.  Evaluated in log space so large p
    cannot overflow.
    """
    sig = traj.config.sigma
    t, y, pos = _grid_view(traj)
    for p in p_list:
        if not 2 <= p <= 64:
            raise ParameterError("p must lie in [2, 64]")
    _require_norms(traj, [f"rho_lp{p:g}" for p in p_list])
    fn = _forcing_norms(traj.spec, t, traj.config.grid, p_list)
    grow = np.concatenate([[0.0], np.cumsum(0.5 * traj.ou.dt * ((1 + sig * np.abs(y[1:])) + (1 + sig * np.abs(y[:-1]))))])
    reports, profile, young = {}, {}, {}
    for p in p_list:
        key = f"rho_lp{p:g}"
        lhs = traj.norms[key]
        r0 = lhs[0]
        K = 1.0 / p
        young[p] = K
        # forcing integral in units of its own maximum to keep powers finite
        fmax = float(np.max(fn[p])) if np.any(fn[p]) else 0.0
        if fmax > 0:
            integrand = np.exp(-p * sig * y + p * np.log(np.maximum(fn[p], 1e-300) / fmax))
            cum = np.concatenate([[0.0], np.cumsum(0.5 * traj.ou.dt * (integrand[1:] + integrand[:-1]))])
        else:
            cum = np.zeros_like(y)
        scale = max(r0, fmax)
        if scale == 0:
            rhs = np.zeros(pos.size)
        else:
            inner = (1.0 / p) * (r0 / scale) ** p + K * (fmax / scale) ** p * cum
            rhs = (p ** (1.0 / p) * scale * inner ** (1.0 / p) * np.exp(grow))[pos]
        reports[p] = BoundCheckReport(f"vorticity_l{p:g}", traj.times.copy(), lhs, rhs,
                                      ROUNDING * rhs, {"young_constant": K})
        profile[p] = float(np.max(lhs)) / p ** (1.0 / p)
    return LpBoundReport(reports, profile, young)


def yudovich_factor(p: float) -> float:
    """p^{-2/p} [p^2 / ((p-1)(p-2))]^{p-2}, which tends to e^3 as p grows."""
    if p <= 3:
        raise ParameterError("the Yudovich factor needs p > 3")
    # log(p^2/((p-1)(p-2))) via log1p to avoid cancellation at large p
    inner = -math.log1p(-1.0 / p) - math.log1p(-2.0 / p)
    return math.exp(-2.0 * math.log(p) / p + (p - 2.0) * inner)


# ---------------------------------------------------------------- continuity and viscosity

def h_distance(a: VorticityState, b: VorticityState) -> float:
    """L^2 distance between the velocity fields of two states."""
    du, dv = a.vel.u - b.vel.u, a.vel.v - b.vel.v
    return float(l2_array(np.hypot(du, dv), a.grid.h))


@dataclass
class FlowContinuityReport:
    initial_distances: np.ndarray
    endpoint_distances: np.ndarray
    failed: list
    decreasing: bool
    loglog_slope: float


def check_flow_continuity(u0: VorticityState, perturbations, cfg: SolverConfig, ou: OUPath,
                          spec: ForcingSpec, T: float, tau: float = 0.0) -> FlowContinuityReport:
    """Evolve u0 and its perturbations together and compare endpoint H-distances.

    ``perturbations`` are full physical states with strictly decreasing
    H-distance to u0.  The log-log slope of endpoint against initial distance
    is reported for comparison with the double-exponential envelope.
    """
    perturbations = list(perturbations)
    d0 = np.array([h_distance(p, u0) for p in perturbations])
    if d0.size > 1 and np.any(np.diff(d0) >= 0):
        raise ParameterError("perturbations must approach u0 strictly")
    recs = evolve_ensemble([u0] + perturbations, tau, T, ou, spec, cfg)
    ref = recs[0]
    failed = [r.failed for r in recs[1:]]
    ends = []
    for r in recs[1:]:
        if r.failed or ref.failed:
            ends.append(math.nan)
        else:
            ends.append(h_distance(r.physical_state(-1), ref.physical_state(-1)))
    ends = np.array(ends)
    ok = np.isfinite(ends)
    decreasing = bool(ok.all() and (ends.size < 2 or np.all(np.diff(ends) < 0)))
    pos = ok & (ends > 0) & (d0 > 0)
    slope = float(np.polyfit(np.log(d0[pos]), np.log(ends[pos]), 1)[0]) if pos.sum() >= 2 else math.nan
    return FlowContinuityReport(d0, ends, failed, decreasing, slope)


@dataclass
class ViscositySweepReport:
    nu_list: np.ndarray
    E: np.ndarray
    E_over_nu: np.ndarray
    failed: list
    non_increasing: bool
    strictly_decreasing: bool


def vanishing_viscosity_sweep(u_tau: VorticityState, nu_list, cfg: SolverConfig, ou: OUPath,
                              spec: ForcingSpec, T: float, tau: float = 0.0) -> ViscositySweepReport:
    """E(nu) = (int ||v_nu - v_0||_H^2 dt)^{1/2} against the inviscid run.

    All runs share one step schedule so E measures viscosity only.
    """
    nus = np.asarray(list(nu_list), dtype=float)
    pos_nus = nus[nus > 0]
    if np.any(nus < 0) or np.any(np.diff(pos_nus) > 0) or (np.any(nus == 0) and nus[-1] != 0):
        raise ParameterError("nu_list must be non-increasing positives optionally ending in 0")
    limit = nu0(cfg.sigma, cfg.grid)
    if np.any(nus > limit):
        raise ParameterError(f"viscosities must not exceed nu0={limit:.4g}")
    run_cfg = dataclasses.replace(cfg, store_every=1, enforce_nu0=False)
    recs = evolve_ensemble([u_tau] * (pos_nus.size + 1), tau, T, ou, spec, run_cfg,
                           nu=np.concatenate([pos_nus, [0.0]]))
    ref = recs[-1]
    h = cfg.grid.h
    E = []
    for r in recs[:-1]:
        if r.failed or ref.failed:
            E.append(math.nan)
            continue
        d2 = np.array([float(l2_array(np.hypot(a.vel.u - b.vel.u, a.vel.v - b.vel.v), h)) ** 2
                       for a, b in zip(r.states, ref.states)])
        E.append(math.sqrt(float(np.sum(0.5 * np.diff(r.times) * (d2[1:] + d2[:-1])))))
    E = np.array(E)
    diffs = np.diff(E)
    return ViscositySweepReport(
        nu_list=pos_nus, E=E, E_over_nu=E / pos_nus, failed=[r.failed for r in recs],
        non_increasing=bool(np.all(np.isfinite(E)) and np.all(diffs <= 0)),
        strictly_decreasing=bool(np.all(np.isfinite(E)) and np.all(diffs < 0)))
