import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlslab.errors import ConvergenceError, ValidationError
from nlslab.groundstate import (
    chebyshev_branch,
    differentiate_branch,
    elliptic_residual,
    finite_difference_derivative,
    log_branch,
    scaling_report,
    solve_ground_state,
    weighted_report,
)
from nlslab.spectral_core import h2_norm, projector_point


@pytest.fixture(scope="module")
def gs05(well_small):
    return solve_ground_state(well_small, 0.05)


@pytest.fixture(scope="module")
def scaling_branch(well_small):
    return log_branch(well_small, 1e-3, 1e-1, 8)


@pytest.fixture(scope="module")
def cheb_branch(well_small):
    return chebyshev_branch(well_small, 0.03, 0.07, 12)


def test_zero_modulus(well_small):
    gs = solve_ground_state(well_small, 0.0)
    assert np.all(gs.Q == 0) and gs.E == well_small.e0


def test_solver_converges_quickly(well_small, gs05):
    assert gs05.residual <= 1e-10
    assert gs05.iterations <= 30
    # independent residual evaluation
    assert elliptic_residual(well_small, gs05.Q, gs05.E) <= 1e-10
    assert isinstance(gs05.E, float)


def test_correction_is_continuous(well_small, gs05):
    g = well_small.grid
    assert g.norm(projector_point(well_small, gs05.q)) < 1e-10


def test_leading_order_energy(well_small):
    g = well_small.grid
    z = 1e-3
    gs = solve_ground_state(well_small, z)
    quad = g.integrate(well_small.phi0**4)
    assert gs.e / z**2 == pytest.approx(quad, rel=0.01)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 2 * np.pi))
def test_gauge_covariance(well_small, theta):
    r = 0.04
    base = solve_ground_state(well_small, r)
    rot = solve_ground_state(well_small, r * np.exp(1j * theta))
    assert np.max(np.abs(rot.Q - np.exp(1j * theta) * base.Q)) <= 1e-12
    assert rot.E == base.E


def test_uniqueness_basin(well_small, gs05):
    g = well_small.grid
    rng = np.random.default_rng(0)
    for _ in range(3):
        pert = rng.standard_normal(g.n_points)
        pert = np.real(g.apply_flat(lambda lam: np.exp(-lam), pert))
        pert *= 0.5 * h2_norm(g, gs05.q) / h2_norm(g, pert)
        again = solve_ground_state(well_small, 0.05, init=gs05.q + pert)
        assert np.max(np.abs(again.Q - gs05.Q)) <= 1e-9


def test_branch_radius_enforced(well_small):
    with pytest.raises(ValidationError):
        solve_ground_state(well_small, 0.6)


def test_nonconvergence_reports_residual(well_small):
    with pytest.raises(ConvergenceError) as info:
        solve_ground_state(well_small, 0.45, max_iter=3)
    assert info.value.residual > 0


def test_single_negative_eigenvalue_required():
    from nlslab.spectral_core import Grid1D, PotentialSpec, build_operator

    deep = build_operator(Grid1D(20.0, 256), PotentialSpec("sech2", 6.0))
    with pytest.raises(ValidationError):
        solve_ground_state(deep, 0.05)


# --- derivatives ----------------------------------------------------------------


def test_derivatives_match_finite_differences(well_small, gs05):
    der = differentiate_branch(well_small, gs05)
    dq, de = finite_difference_derivative(well_small, 0.05)
    assert der.de1 == pytest.approx(de, rel=1e-6)
    g = well_small.grid
    assert g.norm(der.a - dq) / g.norm(dq) <= 1e-6
    # the z2 direction at real z is the gauge rotation: b = q / r exactly
    assert g.norm(der.b - gs05.q / 0.05) / g.norm(der.b) <= 1e-8
    assert der.de2 == 0.0
    assert abs(der.consistency) <= 1e-10


def test_small_z_derivative_is_ground_state(well_small):
    g = well_small.grid
    gs = solve_ground_state(well_small, 1e-3)
    der = differentiate_branch(well_small, gs)
    # D_z Q = (phi0 + a, i (phi0 + b)) -> (phi0, i phi0)
    assert g.norm(der.a) <= 1e-5 and g.norm(der.b) <= 1e-5


def test_gauge_derivative_defect_is_quadratic(well_small):
    g = well_small.grid
    ratios = []
    for z in (0.01, 0.02):
        der = differentiate_branch(well_small, solve_ground_state(well_small, z))
        ratios.append(g.norm(der.a - der.b) / z**2)
    assert ratios[0] == pytest.approx(ratios[1], rel=0.02)


# --- scalings -------------------------------------------------------------------


def test_scaling_exponents(well_small, scaling_branch):
    rep = scaling_report(scaling_branch, well_small.grid)
    assert abs(rep["q_H2"] - 3) <= 0.15
    assert abs(rep["Dzq_H2"] - 2) <= 0.15
    assert abs(rep["e"] - 2) <= 0.15
    assert abs(rep["Dze"] - 1) <= 0.15


@pytest.mark.parametrize("k", [1, 2])
def test_weighted_scaling_exponents(well_small, scaling_branch, k):
    rep = weighted_report(scaling_branch, well_small.grid, k)
    assert abs(rep["q"] - 3) <= 0.15
    assert abs(rep["Dzq"] - 2) <= 0.15


def test_branch_invariants(well_small, scaling_branch):
    assert np.all(scaling_branch.residuals <= 1e-10)
    for qi in scaling_branch.q:
        assert well_small.grid.norm(projector_point(well_small, qi)) < 1e-10


def test_report_preconditions(well_small, scaling_branch):
    short = log_branch(well_small, 1e-2, 1e-1, 3)
    with pytest.raises(ValidationError):
        scaling_report(short, well_small.grid)
    with pytest.raises(ValidationError):
        weighted_report(scaling_branch, well_small.grid, 3)


# --- branch interpolation -------------------------------------------------------


def test_chebyshev_interpolation_matches_direct_solve(well_small, cheb_branch):
    g = well_small.grid
    r = 0.0517
    q, a, b, e, de = cheb_branch.profile(r)
    gs = solve_ground_state(well_small, r)
    der = differentiate_branch(well_small, gs)
    assert g.norm(q - gs.q) / g.norm(gs.q) <= 1e-8
    assert g.norm(a - der.a) / g.norm(der.a) <= 1e-6
    assert e == pytest.approx(gs.e, rel=1e-8)
    assert de == pytest.approx(der.de1, rel=1e-6)


def test_evaluate_is_gauge_covariant(cheb_branch):
    z = 0.05 * np.exp(0.7j)
    Q, d1, d2, E = cheb_branch.evaluate(z)
    Qr, d1r, d2r, Er = cheb_branch.evaluate(0.05)
    assert np.max(np.abs(Q - np.exp(0.7j) * Qr)) <= 1e-14
    assert E == Er
    # derivative of e^{i alpha} Q(r) along the circle: -sin d1 + cos d2 = i Q / r
    c, s = np.cos(0.7), np.sin(0.7)
    assert np.max(np.abs(-s * d1 + c * d2 - 1j * Q / 0.05)) <= 1e-10


def test_profile_outside_range_rejected(cheb_branch, scaling_branch):
    with pytest.raises(ValidationError):
        cheb_branch.profile(0.08)
    with pytest.raises(ValidationError):
        scaling_branch.profile(0.01)


def test_second_derivatives_match_differences(well_small, cheb_branch):
    g = well_small.grid
    D = cheb_branch.second_derivatives(0.05)
    h = 1e-3
    ap = differentiate_branch(well_small, solve_ground_state(well_small, 0.05 + h)).a
    am = differentiate_branch(well_small, solve_ground_state(well_small, 0.05 - h)).a
    ref = (ap - am) / (2 * h)
    assert g.norm(D[0][0] - ref) / g.norm(ref) <= 1e-4
    assert D[0][1] is D[1][0]
