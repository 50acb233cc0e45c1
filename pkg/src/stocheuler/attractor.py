"""Point-cloud estimates of pullback attractors, absorbing radii and autonomy.

An attractor section is approximated by the endpoints S(t, t-s, omega) B of
a finite initial family B at a finite pullback depth s.  Distances are taken
in the L^2 metric of the physical velocity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .bounds import duhamel, energy_constant
from .dynamics import (
    ForcingSpec, SolverConfig, VorticityState, evolve, evolve_ensemble,
)
from .errors import DataError, ParameterError, RangeError
from .field import Grid, ScalarField, l2_array, norms, random_smooth_vorticity
from .noise import OUPath, ou_shift

CONVERGENCE_TOL = 0.05


# ---------------------------------------------------------------- families and clouds

@dataclass(frozen=True)
class InitialFamily:
    """Physical initial states inside {||u||_V <= radius_V, ||curl u||_inf <= radius_curl_inf}."""

    members: tuple
    radius_V: float
    radius_curl_inf: float

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ParameterError("initial family is empty")
        grids = {m.grid for m in self.members}
        if len(grids) != 1:
            raise ParameterError("members live on different grids")
        for m in self.members:
            rep_v = norms(m.vel, p_list=(2,))
            if rep_v.h1 > self.radius_V * (1 + 1e-12) or \
                    float(np.abs(m.rho.data).max()) > self.radius_curl_inf * (1 + 1e-12):
                raise ParameterError("member outside the declared radii")

    @property
    def grid(self) -> Grid:
        return self.members[0].grid

    def __len__(self) -> int:
        return len(self.members)


def make_initial_family(grid: Grid, size: int, radius_V: float, radius_curl_inf: float,
                        seed: int, modes: int = 8, min_fraction: float = 0.5) -> InitialFamily:
    """Random band-limited states rescaled into the radii.

    Each member is scaled so that its binding constraint sits at a uniform
    random fraction in [min_fraction, 1] of the radius.
    """
    rng = np.random.default_rng(seed)
    members = []
    for _ in range(size):
        st = VorticityState.from_vorticity(0.0, random_smooth_vorticity(grid, rng, modes=modes))
        vn = norms(st.vel, p_list=(2,)).h1
        cn = float(np.abs(st.rho.data).max())
        frac = rng.uniform(min_fraction, 1.0)
        members.append(st.scaled(frac * min(radius_V / vn, radius_curl_inf / cn)))
    return InitialFamily(tuple(members), radius_V, radius_curl_inf)


def _flat_velocities(points) -> np.ndarray:
    h = points[0].grid.h
    return np.stack([np.concatenate([p.vel.u.ravel(), p.vel.v.ravel()]) for p in points]) * h


def diameter(points) -> float:
    """Largest pairwise L^2 velocity distance in the cloud."""
    if len(points) < 2:
        return 0.0
    return float(pdist(_flat_velocities(points)).max())


def hausdorff_semidistance(A, B) -> float:
    """sup_{a in A} inf_{b in B} ||a - b||_{L^2} for finite clouds."""
    if len(A) == 0 or len(B) == 0:
        raise ParameterError("clouds must be non-empty")
    if A[0].grid != B[0].grid:
        raise ParameterError("clouds live on different grids")
    return float(cdist(_flat_velocities(A), _flat_velocities(B)).min(axis=1).max())


def noise_floor(points) -> float:
    """Median nearest-neighbour distance inside a cloud (0 for singletons)."""
    if len(points) < 2:
        return 0.0
    d = cdist(_flat_velocities(points), _flat_velocities(points))
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


@dataclass
class AttractorEstimate:
    t: float
    points: list
    pullback_horizons: list
    diam_delta: float
    converged: bool
    diameters: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    @property
    def noise_floor(self) -> float:
        return noise_floor(self.points)

    def save(self, directory: str | Path, tag: str = "") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "points.npy", np.stack([p.rho.data for p in self.points]))
        meta = {"config_hash": tag, "t": self.t, "pullback_horizons": list(self.pullback_horizons),
                "diam_delta": self.diam_delta, "converged": self.converged,
                "diameters": list(self.diameters), "excluded": list(self.excluded)}
        (d / "cloud.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, grid: Grid) -> AttractorEstimate:
        d = Path(directory)
        try:
            meta = json.loads((d / "cloud.json").read_text())
            rho = np.load(d / "points.npy")
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load cloud from {d}: {exc}") from exc
        pts = [VorticityState.from_vorticity(meta["t"], r, grid) for r in rho]
        return cls(meta["t"], pts, meta["pullback_horizons"], meta["diam_delta"],
                   meta["converged"], meta["diameters"], meta["excluded"])


def _check_horizons(t: float, horizons, ou: OUPath) -> list[float]:
    hs = [float(s) for s in horizons]
    if not hs or any(s <= 0 for s in hs) or any(b <= a for a, b in zip(hs, hs[1:])):
        raise ParameterError("horizons must be positive and increasing")
    if t - hs[-1] < ou.t_min - 1e-12 or t > ou.t_max + 1e-12:
        raise RangeError(f"pullback from {t - hs[-1]} to {t} leaves the noise window")
    return hs


def _is_converged(diams: list[float], base: float) -> bool:
    if len(diams) < 2:
        return False
    slack_ok = all(b <= a * (1 + CONVERGENCE_TOL) + 1e-300 for a, b in zip(diams, diams[1:]))
    last, prev = diams[-1], diams[-2]
    settled = abs(last - prev) < CONVERGENCE_TOL * prev or last < CONVERGENCE_TOL * base
    return bool(slack_ok and settled)


def pullback_estimate(t: float, ou: OUPath, B: InitialFamily, horizons, cfg: SolverConfig,
                      spec: ForcingSpec) -> AttractorEstimate:
    """Endpoints S(t, t-s, omega) B for each depth s; the deepest gives the cloud.

    Members that blow up are excluded from the cloud and listed in ``excluded``.
    """
    hs = _check_horizons(t, horizons, ou)
    diams, points, excluded = [], [], []
    for s in hs:
        recs = evolve_ensemble(B.members, t - s, t, ou, spec, cfg)
        bad = [i for i, r in enumerate(recs) if r.failed]
        points = [r.physical_state(-1) for r in recs if not r.failed]
        excluded = bad
        diams.append(diameter(points) if points else math.nan)
    base = diameter(list(B.members))
    return AttractorEstimate(t=t, points=points, pullback_horizons=hs, diam_delta=diams[-1],
                             converged=_is_converged(diams, base), diameters=diams,
                             excluded=excluded)


def autonomous_estimate(ou: OUPath, B: InitialFamily, horizons, cfg: SolverConfig,
                        spec_autonomous: ForcingSpec, t: float = 0.0) -> AttractorEstimate:
    """Pullback estimate of the autonomous system driven by f_inf."""
    if spec_autonomous.kind != "autonomous":
        raise ParameterError("autonomous_estimate needs an autonomous forcing")
    return pullback_estimate(t, ou, B, horizons, cfg, spec_autonomous)


# ---------------------------------------------------------------- absorbing radii

@dataclass(frozen=True)
class AbsorbingRadii:
    t: float
    L1: float
    L2: float
    L1_tail: float = 0.0
    L2_tail: float = 0.0
    t_trunc: float = 0.0
    delta: float = 0.0
    y_weight: float = 1.0


def _tail_integral(spec: ForcingSpec, t_c: float, delta: float, power: int) -> float:
    """int_{-inf}^{t_c} e^{-delta (t_c - xi)} (s(xi)/s(t_c))^power d xi.

    ``s`` is the forcing amplitude factor; infinite when the forcing grows
    backwards faster than delta.
    """
    if spec.kind == "autonomous":
        return 1.0 / delta
    if spec.kind == "custom_table":
        raise RangeError("tabulated forcing has no tail beyond its table")
    r = spec.rate
    if delta <= power * r:
        return math.inf
    s_c = float(spec.scale(t_c))
    # (1 + e^{-r xi})^power expanded binomially
    total = 0.0
    for k in range(power + 1):
        coef = math.comb(power, k)
        q = k * r
        total += coef * math.exp(-q * t_c) / (delta - q)
    return total / s_c ** power


def absorbing_radii(t: float, ou: OUPath, spec: ForcingSpec, sigma: float, t_trunc: float,
                    y_weight: float = 1.0, delta: float | None = None) -> AbsorbingRadii:
    """Radii L1 (V-norm squared) and L2 (vorticity sup) of the absorbing family.

    L1 = 2 int_{-inf}^t exp(int_xi^t (-sigma^2/2 + 2 sigma y) + 2 sigma (y_t - y_xi))
             (||f||^2 + ||curl f||^2)(xi) d xi,
    L2 = 2 int_{-inf}^t exp(int_xi^t (-sigma^2/2 + y_weight sigma y) + sigma (y_t - y_xi))
             ||curl f(xi)||_inf d xi.
    The integrals are computed on [t - t_trunc, t].  Beyond the cutoff the
    noise factor of each integrand is bounded by the smallest envelope
    K e^{-delta (t - xi)} (delta defaults to sigma^2/4) that covers it on the
    sampled window; multiplied by the forcing's own growth this gives the
    reported tails.
    """
    if t_trunc <= 0:
        raise ParameterError("t_trunc must be positive")
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    delta = 0.25 * sigma * sigma if delta is None else delta
    t_c = t - t_trunc
    if t_c < ou.t_min - 1e-12 or t > ou.t_max + 1e-12:
        raise RangeError("truncation window leaves the noise window")
    i0, i1 = ou.index_of(t_c), ou.index_of(t)
    y = ou.values[i0:i1 + 1]
    times = (ou.start + np.arange(i0, i1 + 1)) * ou.dt
    fn = spec.norm_series(times)
    f1 = fn["f_l2"] ** 2 + fn["curl_l2"] ** 2
    f2 = fn["curl_linf"]
    if not np.any(f1) and not np.any(f2):
        return AbsorbingRadii(t, 0.0, 0.0, 0.0, 0.0, t_trunc, delta, y_weight)
    g1, b1 = duhamel(-0.5 * sigma ** 2 + 2 * sigma * y, np.exp(-2 * sigma * y) * f1, ou.dt)
    g2, b2 = duhamel(-0.5 * sigma ** 2 + y_weight * sigma * y, np.exp(-sigma * y) * f2, ou.dt)
    yt = y[-1]
    l1 = 2 * math.exp(2 * sigma * yt) * b1[-1]
    l2 = 2 * math.exp(sigma * yt) * b2[-1]
    # noise factor of each integrand, enveloped by K e^{-delta (t - xi)} over the window
    lag = t - times
    w1 = 2 * np.exp(2 * sigma * (yt - y)) * g1[-1] / g1
    w2 = 2 * np.exp(sigma * (yt - y)) * g2[-1] / g2
    k1 = float(np.max(w1 * np.exp(delta * lag)))
    k2 = float(np.max(w2 * np.exp(delta * lag)))
    edge = math.exp(-delta * t_trunc)
    tail1 = k1 * edge * f1[0] * _tail_integral(spec, t_c, delta, 2) if f1[0] > 0 else 0.0
    tail2 = k2 * edge * f2[0] * _tail_integral(spec, t_c, delta, 1) if f2[0] > 0 else 0.0
    return AbsorbingRadii(t, l1 + tail1, l2 + tail2, tail1, tail2, t_trunc, delta, y_weight)


@dataclass
class AbsorptionReport:
    V_norms: np.ndarray
    V_bound: float
    curl_sup: np.ndarray
    curl_bound: float
    factor_V: float
    absorbed: bool


def check_absorption(points, radii: AbsorbingRadii, sigma: float,
                     rel_tol: float = 0.02, C: float | None = None) -> AbsorptionReport:
    """Do the cloud points lie in the absorbing ball?

    The V-norm test uses ||u||_V^2 <= (2 C / sigma^2) L1 with the calibrated
    energy constant C (the factor the energy bound attaches to its forcing
    term); the vorticity test uses ||curl u||_inf <= L2 with the
    maximum-principle tolerance rel_tol + h^2.
    """
    grid = points[0].grid
    C = energy_constant(grid.n) if C is None else C
    factor = 2.0 * C / (sigma * sigma)
    vn = np.array([norms(p.vel, p_list=(2,)).h1 for p in points])
    cs = np.array([float(np.abs(p.rho.data).max()) for p in points])
    v_bound = math.sqrt(factor * radii.L1)
    c_bound = radii.L2 * (1 + rel_tol + grid.h ** 2)
    ok = bool(np.all(vn <= v_bound) and np.all(cs <= c_bound))
    return AbsorptionReport(vn, v_bound, cs, c_bound, factor, ok)


# ---------------------------------------------------------------- autonomy

@dataclass
class AutonomyReport:
    times: list
    distances: list
    diam_nonautonomous: list
    diam_autonomous: float
    noise_floor: float
    radii: list
    decreasing: bool
    estimates: list = field(default_factory=list, repr=False)
    reference: AttractorEstimate | None = field(default=None, repr=False)


def asymptotic_autonomy_sweep(times, ou: OUPath, B: InitialFamily, cfg: SolverConfig,
                              spec_nonautonomous: ForcingSpec, spec_autonomous: ForcingSpec,
                              horizons=(1.0, 2.0), t_trunc: float | None = None) -> AutonomyReport:
    """Hausdorff semi-distance from the time-t pullback cloud to the autonomous cloud.

    The autonomous cloud is estimated once at time 0 along omega.  The
    non-autonomous cloud at time t runs along theta_{-t} omega, so both
    clouds see the same noise samples and differ only through the forcing.
    """
    ts = [float(t) for t in times]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ParameterError("times must be increasing")
    ref = autonomous_estimate(ou, B, horizons, cfg, spec_autonomous, t=0.0)
    dists, diams, radii, ests = [], [], [], []
    for t in ts:
        shifted = ou_shift(ou, -t)
        est = pullback_estimate(t, shifted, B, horizons, cfg, spec_nonautonomous)
        ests.append(est)
        dists.append(hausdorff_semidistance(est.points, ref.points))
        diams.append(est.diam_delta)
        if t_trunc is not None and cfg.sigma > 0:
            radii.append(absorbing_radii(t, shifted, spec_nonautonomous, cfg.sigma, t_trunc))
    decreasing = all(b < a for a, b in zip(dists, dists[1:]))
    return AutonomyReport(ts, dists, diams, ref.diam_delta, ref.noise_floor, radii,
                          decreasing, ests, ref)


@dataclass
class ForwardConvergenceReport:
    taus: list
    distances: list
    decreasing: bool


def forward_convergence(ou: OUPath, v_bar0: VorticityState, perturbation: VorticityState,
                        taus, T: float, cfg: SolverConfig, spec_nonautonomous: ForcingSpec,
                        spec_autonomous: ForcingSpec) -> ForwardConvergenceReport:
    """||v(T+tau, tau, theta_{-tau} omega, v_tau) - vbar(T, omega, vbar_0)||_H for growing tau.

    Initial data v_tau = vbar_0 + perturbation / tau, all in transformed variables.
    """
    ref = evolve(v_bar0, 0.0, T, ou, spec_autonomous, cfg, transformed=True).final_state
    h = cfg.grid.h
    dists = []
    for tau in taus:
        v_tau = VorticityState.from_vorticity(
            tau, ScalarField(cfg.grid, v_bar0.rho.data + perturbation.rho.data / tau))
        end = evolve(v_tau, tau, tau + T, ou_shift(ou, -tau), spec_nonautonomous, cfg,
                     transformed=True).final_state
        dists.append(float(l2_array(np.hypot(end.vel.u - ref.vel.u, end.vel.v - ref.vel.v), h)))
    return ForwardConvergenceReport(list(taus), dists, all(b < a for a, b in zip(dists, dists[1:])))


def invariance_gap(est_tau: AttractorEstimate, est_t: AttractorEstimate, ou: OUPath,
                   cfg: SolverConfig, spec: ForcingSpec) -> tuple[float, float]:
    """Semi-distance of S(t, tau) applied to the tau-cloud from the t-cloud, and 2x noise floor."""
    recs = evolve_ensemble(est_tau.points, est_tau.t, est_t.t, ou, spec, cfg)
    moved = [r.physical_state(-1) for r in recs if not r.failed]
    return hausdorff_semidistance(moved, est_t.points), 2.0 * est_t.noise_floor
