import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from stocheuler.dynamics import (
    ForcingSpec, SolverConfig, TrajectoryRecord, VorticityState, arakawa_jacobian,
    evolve, evolve_ensemble, forcing_eval, nu0, rhs_vorticity, stable_dt, step, trace_constant,
)
from stocheuler.errors import BlowupError, DataError, ParameterError, RangeError
from stocheuler.field import (
    Grid, ScalarField, VectorField, curl, norms, random_smooth_vorticity, sine_series,
)
from stocheuler.noise import OUPath, sample_ou


def _flat_ou(value=0.0, t_min=-4.0, t_max=4.0, dt=2.0 ** -5):
    n = int(round((t_max - t_min) / dt)) + 1
    return OUPath(start=int(round(t_min / dt)), dt=dt, values=np.full(n, value))


def _smooth_state(grid, seed=0, scale=1.0, t=0.0):
    rho = random_smooth_vorticity(grid, np.random.default_rng(seed), modes=6).data
    return VorticityState.from_vorticity(t, ScalarField(grid, scale * rho / np.abs(rho).max()))


# ---------------------------------------------------------------- configuration

def test_trace_constant_frozen():
    # regression value of the grid calibration at n=64 (fixed seed, 64 samples)
    assert trace_constant(64) == pytest.approx(0.46087, rel=1e-3)
    assert nu0(1.0, Grid(64)) == pytest.approx(1.0 / (8 * trace_constant(64)), rel=1e-14)


def test_nu_above_nu0_rejected(grid32):
    limit = nu0(1.0, grid32)
    SolverConfig(nu=0.99 * limit, sigma=1.0, grid=grid32)
    with pytest.raises(ParameterError, match="nu0"):
        SolverConfig(nu=1.01 * limit, sigma=1.0, grid=grid32)


@pytest.mark.parametrize("kw", [{"nu": -1.0}, {"sigma": -0.1}, {"cfl": 1.0}, {"dt_max": 0.0},
                                {"record_every": 0}])
def test_solver_config_validation(grid32, kw):
    base = {"nu": 0.0, "sigma": 1.0, "grid": grid32}
    with pytest.raises(ParameterError):
        SolverConfig(**{**base, **kw})


def test_config_hash_is_stable(grid32):
    a = SolverConfig(nu=0.0, sigma=1.0, grid=grid32)
    b = SolverConfig(nu=0.0, sigma=1.0, grid=grid32)
    c = SolverConfig(nu=0.0, sigma=0.5, grid=grid32)
    assert a.config_hash() == b.config_hash() != c.config_hash()


# ---------------------------------------------------------------- forcing

def test_autonomous_forcing_is_time_independent(grid32):
    spec = ForcingSpec.sine_mode(grid32, 3.0)
    for t in (-5.0, 0.0, 7.5):
        val = forcing_eval(spec, t)
        assert np.array_equal(val.f.u, spec.f_inf.u)
        assert np.array_equal(val.curl_f.data, spec.curl_f_inf.data)


def test_decaying_forcing_closed_form(grid32):
    spec = ForcingSpec.sine_mode(grid32, 3.0, kind="decaying_to_autonomous", rate=1.0)
    v0 = forcing_eval(spec, 0.0)
    np.testing.assert_allclose(v0.f.u, 2 * spec.f_inf.u, rtol=1e-15)
    np.testing.assert_allclose(v0.curl_f.data, 2 * spec.curl_f_inf.data, rtol=1e-15)
    v2 = forcing_eval(spec, 2.0)
    np.testing.assert_allclose(v2.f.v, (1 + math.exp(-2.0)) * spec.f_inf.v, rtol=1e-15)


def test_decaying_forcing_convergence_integral(grid32):
    spec = ForcingSpec.sine_mode(grid32, 3.0, kind="decaying_to_autonomous", rate=1.0)
    base = norms(spec.f_inf, p_list=(2,)).l2

    def integral(tau, T=5.0):
        t = np.linspace(tau, tau + T, 2001)
        g = ((spec.scale(t) - 1.0) * base) ** 2
        return trapezoid(g, t)

    assert integral(1.0) / integral(0.0) == pytest.approx(math.exp(-2.0), rel=0.05)


def test_sine_mode_curl(grid64):
    spec = ForcingSpec.sine_mode(grid64, 2.0, mode=(1, 2))
    coef = np.zeros((1, 2))
    coef[0, 1] = 2.0
    ref = sine_series(grid64, coef)
    assert np.abs(spec.curl_f_inf.data - ref).max() < 0.02 * 2.0


def test_forcing_spec_validation(grid32):
    f = ForcingSpec.sine_mode(grid32, 1.0)
    with pytest.raises(ParameterError):
        ForcingSpec("autonomous", f.f_inf, f.curl_f_inf.scale(3.0))
    with pytest.raises(ParameterError):
        ForcingSpec("decaying_to_autonomous", f.f_inf, f.curl_f_inf, rate=0.0)
    with pytest.raises(ParameterError):
        ForcingSpec("periodic", f.f_inf, f.curl_f_inf)


def test_table_forcing_interpolates_and_checks_range(grid32):
    f = ForcingSpec.sine_mode(grid32, 1.0)
    spec = ForcingSpec("custom_table", f.f_inf, f.curl_f_inf, table_times=(0.0, 1.0),
                       table_f=(f.f_inf, f.f_inf.scale(3.0)),
                       table_curl=(f.curl_f_inf, f.curl_f_inf.scale(3.0)))
    np.testing.assert_allclose(forcing_eval(spec, 0.5).curl_f.data, 2 * f.curl_f_inf.data)
    with pytest.raises(RangeError):
        forcing_eval(spec, 1.5)


# ---------------------------------------------------------------- right-hand side

def test_rest_state_has_zero_rhs(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32)
    out = rhs_vorticity(VorticityState.zeros(grid32), 0.3, ForcingSpec.zero(grid32), cfg)
    assert not np.any(out.data)


@pytest.mark.parametrize("seed", range(5))
def test_advection_is_enstrophy_and_energy_neutral(grid32, seed):
    st_ = _smooth_state(grid32, seed, scale=10.0)
    cfg = SolverConfig(nu=0.0, sigma=0.0, grid=grid32)
    out = rhs_vorticity(st_, 0.0, ForcingSpec.zero(grid32), cfg).data
    scale = np.abs(out).max() * np.abs(st_.rho.data).max() * out.size
    assert abs(np.sum(st_.rho.data * out)) <= 1e-14 * scale
    assert abs(np.sum(st_.psi.data * out)) <= 1e-14 * scale * np.abs(st_.psi.data).max() / np.abs(st_.rho.data).max()


def test_jacobian_of_constant_vanishes_inside(grid32, rng):
    psi = rng.standard_normal((32, 32))
    jac = arakawa_jacobian(psi, np.full((32, 32), 4.0), grid32.h)
    # away from the boundary ring the constant has no gradient
    assert np.abs(jac[1:-1, 1:-1]).max() <= 1e-12 * np.abs(psi).max() / grid32.h ** 2


def test_jacobian_second_order():
    errs = []
    for n in (32, 64):
        g = Grid(n)
        X, Y = g.mesh()
        a = np.sin(np.pi * X) * np.sin(2 * np.pi * Y)
        b = np.sin(2 * np.pi * X) * np.sin(np.pi * Y)
        ax, ay = np.pi * np.cos(np.pi * X) * np.sin(2 * np.pi * Y), 2 * np.pi * np.sin(np.pi * X) * np.cos(2 * np.pi * Y)
        bx, by = 2 * np.pi * np.cos(2 * np.pi * X) * np.sin(np.pi * Y), np.pi * np.sin(2 * np.pi * X) * np.cos(np.pi * Y)
        errs.append(np.sqrt(np.sum((arakawa_jacobian(a, b, g.h) - (ax * by - ay * bx)) ** 2)) * g.h)
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.2)


# ---------------------------------------------------------------- stepping

def test_zero_state_stays_zero(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32)
    out = step(VorticityState.zeros(grid32), sample_ou(-1, 1, 2.0 ** -5, 0),
               ForcingSpec.zero(grid32), cfg)
    assert not np.any(out.rho.data)
    assert out.t > 0


def test_step_never_crosses_noise_grid(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32, dt_max=1.0)
    ou = sample_ou(-1, 1, 2.0 ** -5, 0)
    out = step(_smooth_state(grid32, t=0.01), ou, ForcingSpec.zero(grid32), cfg)
    assert out.t <= 2.0 ** -5 + 1e-15
    assert out.is_consistent()


def test_richardson_third_order(grid32):
    cfg = SolverConfig(nu=0.0, sigma=0.0, grid=grid32)
    ou, spec = _flat_ou(), ForcingSpec.zero(grid32)
    s0 = _smooth_state(grid32, 3, scale=20.0)
    diffs = []
    for dt in (2.0 ** -6, 2.0 ** -7):
        one = step(s0, ou, spec, cfg, dt=dt)
        two = step(step(s0, ou, spec, cfg, dt=dt / 2), ou, spec, cfg, dt=dt / 2)
        diffs.append(np.abs(one.rho.data - two.rho.data).max())
    assert diffs[0] / diffs[1] > 8.0 * 0.8


def test_pure_decay_harness(grid32):
    # the lowest sine mode advects itself to zero, so only the linear terms act
    sigma, nu, y0, dt = 1.0, 1e-3, 0.4, 2.0 ** -7
    cfg = SolverConfig(nu=nu, sigma=sigma, grid=grid32)
    coef = np.ones((1, 1))
    s0 = VorticityState.from_vorticity(0.0, ScalarField(grid32, sine_series(grid32, coef)))
    lam = 8.0 / grid32.h ** 2 * math.sin(math.pi * grid32.h / 2) ** 2
    rate = -0.5 * sigma ** 2 + sigma * y0 - nu * lam
    out = step(s0, _flat_ou(y0), ForcingSpec.zero(grid32), cfg, dt=dt)
    err = np.abs(out.rho.data - s0.rho.data * math.exp(rate * dt)).max()
    assert err <= abs(rate * dt) ** 3


def test_stable_dt_respects_limits(grid32):
    cfg = SolverConfig(nu=1e-3, sigma=1.0, grid=grid32, dt_max=0.1)
    s0 = _smooth_state(grid32, scale=50.0)
    dt = stable_dt(s0.rho.data, 0.2, cfg)
    speed = np.hypot(s0.vel.u, s0.vel.v).max() * math.exp(0.2)
    assert dt <= cfg.cfl * grid32.h / speed * (1 + 1e-12)
    assert dt <= cfg.cfl * grid32.h ** 2 / (4 * 1e-3)


# ---------------------------------------------------------------- evolution

def test_evolve_zero_stays_zero(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32)
    rec = evolve(VorticityState.zeros(grid32), 0.0, 0.5, sample_ou(-1, 1, 2.0 ** -5, 1),
                 ForcingSpec.zero(grid32), cfg)
    assert all(not np.any(v) for v in rec.norms.values())


def test_cocycle_is_bitwise(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32)
    ou = sample_ou(-1, 2, 2.0 ** -5, 4)
    spec = ForcingSpec.sine_mode(grid32, 3.0, kind="decaying_to_autonomous", rate=1.0)
    u0 = _smooth_state(grid32, 1, scale=5.0, t=-0.5)
    full = evolve(u0, -0.5, 1.0, ou, spec, cfg)
    first = evolve(u0, -0.5, 0.25, ou, spec, cfg)
    second = evolve(first.final_state, 0.25, 1.0, ou, spec, cfg, transformed=True)
    assert np.array_equal(full.final_state.rho.data, second.final_state.rho.data)


def test_physical_restart_matches_to_rounding(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32)
    ou = sample_ou(-1, 2, 2.0 ** -5, 4)
    spec = ForcingSpec.zero(grid32)
    u0 = _smooth_state(grid32, 1, scale=5.0)
    full = evolve(u0, 0.0, 1.0, ou, spec, cfg)
    first = evolve(u0, 0.0, 0.5, ou, spec, cfg)
    second = evolve(first.physical_state(-1), 0.5, 1.0, ou, spec, cfg)
    np.testing.assert_allclose(second.final_state.rho.data, full.final_state.rho.data,
                               rtol=1e-10, atol=1e-12)


def test_deterministic_replay(grid32):
    cfg = SolverConfig(nu=0.0, sigma=0.0, grid=grid32)
    spec = ForcingSpec.sine_mode(grid32, 2.0)
    runs = [evolve(_smooth_state(grid32, 2), 0.0, 0.5, sample_ou(-1, 1, 2.0 ** -5, 9), spec, cfg)
            for _ in range(2)]
    assert np.array_equal(runs[0].final_state.rho.data, runs[1].final_state.rho.data)
    for k in runs[0].norms:
        assert np.array_equal(runs[0].norms[k], runs[1].norms[k])


def test_physical_conversion(grid32):
    cfg = SolverConfig(nu=0.0, sigma=0.8, grid=grid32)
    ou = sample_ou(-1, 1, 2.0 ** -5, 6)
    u0 = _smooth_state(grid32, 5, scale=3.0)
    rec = evolve(u0, 0.0, 0.25, ou, ForcingSpec.zero(grid32), cfg)
    # the stored initial state is v_tau = e^{-sigma y_tau} u_tau
    np.testing.assert_allclose(rec.states[0].rho.data * math.exp(0.8 * ou.at(0.0)), u0.rho.data,
                               rtol=1e-14)
    np.testing.assert_allclose(rec.physical("rho_linf")[0], np.abs(u0.rho.data).max(), rtol=1e-14)


def test_inviscid_conservation_small_grid(grid32):
    cfg = SolverConfig(nu=0.0, sigma=0.0, grid=grid32)
    rec = evolve(_smooth_state(grid32, 7, scale=10.0), 0.0, 0.5, _flat_ou(),
                 ForcingSpec.zero(grid32), cfg)
    z, e = rec.norms["rho_l2"] ** 2, rec.norms["energy"]
    assert abs(z[-1] / z[0] - 1) < 1e-3
    assert abs(e[-1] / e[0] - 1) < 1e-3


def test_thinning_keeps_norm_history(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32, store_every=4)
    rec = evolve(_smooth_state(grid32), 0.0, 0.5, sample_ou(-1, 1, 2.0 ** -5, 2),
                 ForcingSpec.zero(grid32), cfg)
    assert rec.times.size == 17
    assert all(np.isfinite(v).all() and v.size == 17 for v in rec.norms.values())
    assert rec.stored_indices() == [0, 4, 8, 12, 16]
    with pytest.raises(DataError):
        rec.physical_state(3)


def test_trajectory_round_trip(tmp_path, grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32, store_every=2)
    ou = sample_ou(-1, 1, 2.0 ** -5, 2)
    rec = evolve(_smooth_state(grid32), 0.0, 0.25, ou, ForcingSpec.zero(grid32), cfg)
    rec.save(tmp_path / "traj")
    back = TrajectoryRecord.load(tmp_path / "traj", cfg, ou)
    assert np.array_equal(back.times, rec.times)
    assert np.array_equal(back.final_state.rho.data, rec.final_state.rho.data)
    for k in rec.norms:
        assert np.array_equal(back.norms[k], rec.norms[k])
    other = SolverConfig(nu=0.0, sigma=0.5, grid=grid32, store_every=2)
    with pytest.raises(DataError):
        TrajectoryRecord.load(tmp_path / "traj", other, ou)


def test_blowup_is_reported(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32, max_substeps=1)
    with pytest.raises(BlowupError) as info:
        evolve(_smooth_state(grid32, scale=1e4), 0.0, 0.25, _flat_ou(), ForcingSpec.zero(grid32), cfg)
    assert "rho_linf" in info.value.diagnostics


def test_ensemble_flags_only_failing_member(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32, max_substeps=2)
    members = [_smooth_state(grid32, scale=1.0), _smooth_state(grid32, scale=1e4)]
    recs = evolve_ensemble(members, 0.0, 0.25, _flat_ou(), ForcingSpec.zero(grid32), cfg)
    assert [r.failed for r in recs] == [False, True]
    assert recs[1].failure


def test_window_errors(grid32):
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=grid32)
    ou = sample_ou(-1, 1, 2.0 ** -5, 2)
    with pytest.raises(RangeError):
        evolve(VorticityState.zeros(grid32), 0.0, 2.0, ou, ForcingSpec.zero(grid32), cfg)
    with pytest.raises(ParameterError):
        evolve(VorticityState.zeros(grid32), 0.5, 0.0, ou, ForcingSpec.zero(grid32), cfg)


@settings(max_examples=10, deadline=None)
@given(c=st.floats(-3, 3).filter(lambda c: abs(c) > 1e-3))
def test_consistency_triple_scales(c):
    g = Grid(16)
    s = _smooth_state(g, 1).scaled(c)
    assert s.is_consistent()
