import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from stocheuler.attractor import (
    AttractorEstimate, InitialFamily, _is_converged, absorbing_radii, asymptotic_autonomy_sweep,
    autonomous_estimate, check_absorption, diameter, forward_convergence,
    hausdorff_semidistance, invariance_gap, make_initial_family, noise_floor, pullback_estimate,
)
from stocheuler.bounds import h_distance
from stocheuler.dynamics import ForcingSpec, SolverConfig, VorticityState
from stocheuler.errors import DataError, ParameterError, RangeError
from stocheuler.field import Grid, ScalarField, norms
from stocheuler.noise import OUPath, ou_shift, sample_ou

G = Grid(16)
CFG = SolverConfig(nu=0.0, sigma=1.0, grid=G)


def _flat_ou(value=0.0, t_min=-12.0, t_max=4.0, dt=2.0 ** -5):
    n = int(round((t_max - t_min) / dt)) + 1
    return OUPath(start=int(round(t_min / dt)), dt=dt, values=np.full(n, value))


def _cloud(seed, size, n=8):
    rng = np.random.default_rng(seed)
    g = Grid(n)
    return [VorticityState.from_vorticity(0.0, ScalarField(g, rng.standard_normal((n, n))))
            for _ in range(size)]


@pytest.fixture(scope="module")
def family():
    return make_initial_family(G, 4, radius_V=5.0, radius_curl_inf=5.0, seed=3)


# ---------------------------------------------------------------- families and distances

def test_family_respects_radii(family):
    for m in family.members:
        assert norms(m.vel, p_list=(2,)).h1 <= 5.0 * (1 + 1e-12)
        assert np.abs(m.rho.data).max() <= 5.0 * (1 + 1e-12)
    assert len(family) == 4


def test_family_rejects_outsiders(family):
    with pytest.raises(ParameterError):
        InitialFamily(family.members, radius_V=0.1, radius_curl_inf=5.0)
    with pytest.raises(ParameterError):
        InitialFamily((), 1.0, 1.0)


def test_hausdorff_identical_and_subset():
    A = _cloud(0, 5)
    assert hausdorff_semidistance(A, A) == 0.0
    assert hausdorff_semidistance(A[:2], A) == 0.0
    assert hausdorff_semidistance(A, A[:2]) > 0.0


def test_hausdorff_singletons_match_h_distance():
    a, b = _cloud(1, 2)
    assert hausdorff_semidistance([a], [b]) == pytest.approx(h_distance(a, b), rel=1e-12)


def test_hausdorff_errors():
    with pytest.raises(ParameterError):
        hausdorff_semidistance([], _cloud(0, 1))
    with pytest.raises(ParameterError):
        hausdorff_semidistance(_cloud(0, 1, n=8), _cloud(0, 1, n=9))


@settings(max_examples=25, deadline=None)
@given(sa=st.integers(0, 999), sb=st.integers(0, 999), sc=st.integers(0, 999),
       na=st.integers(1, 5), nb=st.integers(1, 5), nc=st.integers(1, 5))
def test_hausdorff_triangle(sa, sb, sc, na, nb, nc):
    A, B, C = _cloud(sa, na), _cloud(sb, nb), _cloud(sc, nc)
    lhs = hausdorff_semidistance(A, C)
    assert lhs <= hausdorff_semidistance(A, B) + hausdorff_semidistance(B, C) + 1e-12


def test_diameter_matches_pairwise():
    A = _cloud(4, 4)
    ref = max(h_distance(a, b) for a in A for b in A)
    assert diameter(A) == pytest.approx(ref, rel=1e-12)
    assert diameter(A[:1]) == 0.0
    assert noise_floor(A[:1]) == 0.0
    assert 0 < noise_floor(A) <= diameter(A)


def test_convergence_rule():
    assert _is_converged([1.0, 0.5, 0.49], 1.0)
    assert _is_converged([1.0, 0.5, 0.01], 1.0)
    assert not _is_converged([1.0, 0.5, 0.2], 1.0)
    assert not _is_converged([1.0, 1.2, 1.19], 1.0)
    assert not _is_converged([1.0], 1.0)


# ---------------------------------------------------------------- pullback clouds

def test_singleton_has_zero_diameter():
    B = make_initial_family(G, 1, 5.0, 5.0, seed=1)
    est = pullback_estimate(0.0, sample_ou(-4, 1, 2.0 ** -5, 1), B, [1.0, 2.0], CFG,
                            ForcingSpec.zero(G))
    assert est.diameters == [0.0, 0.0]


def test_unforced_clouds_contract(family):
    est = pullback_estimate(0.0, sample_ou(-8, 1, 2.0 ** -5, 2), family, [1.0, 2.0, 4.0],
                            CFG, ForcingSpec.zero(G))
    assert est.diameters[-1] < est.diameters[0]
    assert max(np.abs(p.rho.data).max() for p in est.points) < 5.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_unforced_contraction_follows_the_noise_path(family, seed):
    # without forcing the cloud only rescales: exp(-sigma^2/2 d + sigma int y + sigma(y(-1) - y(-8)))
    ou = sample_ou(-9, 1, 2.0 ** -5, seed)
    d = pullback_estimate(0.0, ou, family, [1.0, 8.0], CFG, ForcingSpec.zero(G)).diameters
    integral = float(trapezoid(ou.segment(-8, -1), dx=ou.dt))
    expected = math.exp(-3.5 + integral + ou.at(-1) - ou.at(-8))
    assert d[1] / d[0] == pytest.approx(expected, rel=0.05)


def test_zero_forcing_collapses_to_origin(family):
    est = autonomous_estimate(_flat_ou(), family, [8.0], CFG, ForcingSpec.zero(G))
    # y = 0 leaves only the sigma^2/2 damping: e^{-4} of the initial size at most
    assert max(np.abs(p.rho.data).max() for p in est.points) <= 5.0 * math.exp(-4.0) * 1.05


def test_permutation_invariance(family):
    ou = sample_ou(-4, 1, 2.0 ** -5, 5)
    spec = ForcingSpec.sine_mode(G, 3.0)
    a = pullback_estimate(0.0, ou, family, [1.0, 2.0], CFG, spec)
    rev = InitialFamily(family.members[::-1], family.radius_V, family.radius_curl_inf)
    b = pullback_estimate(0.0, ou, rev, [1.0, 2.0], CFG, spec)
    assert a.diameters == pytest.approx(b.diameters, rel=1e-12)


def test_shift_consistency_is_bitwise(family):
    ou = sample_ou(-6, 4, 2.0 ** -5, 6)
    spec = ForcingSpec.sine_mode(G, 3.0)
    at_t = pullback_estimate(1.5, ou, family, [2.0], CFG, spec)
    at_0 = autonomous_estimate(ou_shift(ou, 1.5), family, [2.0], CFG, spec)
    for p, q in zip(at_t.points, at_0.points):
        assert np.array_equal(p.rho.data, q.rho.data)


def test_pullback_window_and_horizon_checks(family):
    ou = sample_ou(-2, 1, 2.0 ** -5, 6)
    with pytest.raises(RangeError):
        pullback_estimate(0.0, ou, family, [4.0], CFG, ForcingSpec.zero(G))
    with pytest.raises(ParameterError):
        pullback_estimate(0.0, ou, family, [1.0, 0.5], CFG, ForcingSpec.zero(G))
    with pytest.raises(ParameterError):
        autonomous_estimate(ou, family, [1.0], CFG,
                            ForcingSpec.sine_mode(G, 1.0, kind="decaying_to_autonomous", rate=1.0))


def test_blowup_members_are_excluded():
    cfg = SolverConfig(nu=0.0, sigma=1.0, grid=G, max_substeps=1)
    B = make_initial_family(G, 2, 1e5, 1e5, seed=0, min_fraction=1.0)
    small = make_initial_family(G, 1, 1.0, 1.0, seed=1)
    mixed = InitialFamily(small.members + B.members, 1e5, 1e5)
    est = pullback_estimate(0.0, _flat_ou(), mixed, [0.5], cfg, ForcingSpec.zero(G))
    assert est.excluded == [1, 2]
    assert len(est.points) == 1


def test_cloud_round_trip(tmp_path, family):
    est = pullback_estimate(0.0, sample_ou(-2, 1, 2.0 ** -5, 7), family, [1.0], CFG,
                            ForcingSpec.sine_mode(G, 2.0))
    est.save(tmp_path / "c", tag="abc")
    back = AttractorEstimate.load(tmp_path / "c", G)
    assert back.diameters == est.diameters
    for p, q in zip(back.points, est.points):
        assert np.array_equal(p.rho.data, q.rho.data)
    with pytest.raises(DataError):
        AttractorEstimate.load(tmp_path / "missing", G)


# ---------------------------------------------------------------- absorbing radii

def test_radii_vanish_without_forcing():
    r = absorbing_radii(0.0, sample_ou(-5, 1, 2.0 ** -5, 1), ForcingSpec.zero(G), 1.0, 4.0)
    assert (r.L1, r.L2) == (0.0, 0.0)


def test_radii_closed_form_for_flat_noise():
    sigma, T = 1.0, 4.0
    spec = ForcingSpec.sine_mode(G, 3.0)
    r = absorbing_radii(0.0, _flat_ou(), spec, sigma, T)
    f = norms(spec.f_inf, p_list=(2,)).l2 ** 2 + norms(spec.curl_f_inf, p_list=(2,)).l2 ** 2
    cinf = np.abs(spec.curl_f_inf.data).max()
    decay = 1 - math.exp(-sigma ** 2 * T / 2)
    assert r.L1 - r.L1_tail == pytest.approx(2 * (2 / sigma ** 2) * f * decay, rel=1e-4)
    assert r.L2 - r.L2_tail == pytest.approx(2 * (2 / sigma ** 2) * cinf * decay, rel=1e-4)
    # flat noise: the envelope is 2 e^{-delta (t - xi)} with delta = sigma^2/4
    d = sigma ** 2 / 4
    assert r.L1_tail == pytest.approx(2 * f * math.exp(-d * T) / d, rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_doubling_truncation_stays_within_tail(seed):
    ou = sample_ou(-20, 1, 2.0 ** -5, seed)
    spec = ForcingSpec.sine_mode(G, 3.0)
    a = absorbing_radii(0.0, ou, spec, 1.0, 8.0)
    b = absorbing_radii(0.0, ou, spec, 1.0, 16.0)
    assert abs(b.L1 - a.L1) <= a.L1_tail + b.L1_tail
    assert abs(b.L2 - a.L2) <= a.L2_tail + b.L2_tail


def test_tail_infinite_when_forcing_outgrows_decay():
    spec = ForcingSpec.sine_mode(G, 3.0, kind="decaying_to_autonomous", rate=1.0)
    r = absorbing_radii(0.0, _flat_ou(), spec, 1.0, 4.0)
    assert math.isinf(r.L1) and math.isinf(r.L2)
    slow = ForcingSpec.sine_mode(G, 3.0, kind="decaying_to_autonomous", rate=0.1)
    assert math.isfinite(absorbing_radii(0.0, _flat_ou(), slow, 1.0, 4.0).L1)


def test_radii_errors():
    ou = sample_ou(-2, 1, 2.0 ** -5, 0)
    spec = ForcingSpec.sine_mode(G, 3.0)
    with pytest.raises(RangeError):
        absorbing_radii(0.0, ou, spec, 1.0, 4.0)
    with pytest.raises(ParameterError):
        absorbing_radii(0.0, ou, spec, 1.0, 0.0)


def test_absorption_on_small_grid(family):
    ou = sample_ou(-10, 1, 2.0 ** -5, 4)
    spec = ForcingSpec.sine_mode(G, 5.0)
    est = pullback_estimate(0.0, ou, family, [8.0], CFG, spec)
    rep = check_absorption(est.points, absorbing_radii(0.0, ou, spec, 1.0, 9.0), 1.0)
    assert rep.absorbed
    assert rep.factor_V > 0


# ---------------------------------------------------------------- autonomy

def test_identical_systems_have_zero_distance(family):
    ou = sample_ou(-6, 6, 2.0 ** -5, 8)
    spec = ForcingSpec.sine_mode(G, 3.0)
    rep = asymptotic_autonomy_sweep([1.0, 2.0], ou, family, CFG, spec, spec, horizons=(1.0,))
    assert all(d <= rep.noise_floor for d in rep.distances)
    assert rep.distances == [0.0, 0.0]


def test_decaying_forcing_distance_shrinks(family):
    ou = sample_ou(-8, 8, 2.0 ** -5, 9)
    spec = ForcingSpec.sine_mode(G, 5.0, kind="decaying_to_autonomous", rate=1.0)
    rep = asymptotic_autonomy_sweep([1.0, 3.0, 5.0], ou, family, CFG, spec, spec.as_autonomous(),
                                    horizons=(1.0,))
    assert rep.decreasing


def test_forward_convergence(family):
    ou = sample_ou(-8, 8, 2.0 ** -5, 10)
    spec = ForcingSpec.sine_mode(G, 5.0, kind="decaying_to_autonomous", rate=1.0)
    v0 = family.members[0]
    pert = family.members[1]
    rep = forward_convergence(ou, v0, pert, [1.0, 2.0, 4.0], 1.0, CFG, spec, spec.as_autonomous())
    assert rep.decreasing


def test_invariance_gap_is_reported(family):
    ou = sample_ou(-8, 2, 2.0 ** -5, 11)
    spec = ForcingSpec.sine_mode(G, 3.0)
    a = pullback_estimate(-1.0, ou, family, [4.0], CFG, spec)
    b = pullback_estimate(0.0, ou, family, [5.0], CFG, spec)
    gap, floor = invariance_gap(a, b, ou, CFG, spec)
    # same initial set and noise: moving the earlier cloud forward reproduces the later one
    assert gap <= 1e-10 * diameter(b.points) + 1e-14
    assert floor >= 0
