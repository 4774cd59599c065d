import numpy as np
import pytest

from nlslab.errors import NumericalError, ValidationError
from nlslab.evolution import EvolutionConfig
from nlslab.groundstate import chebyshev_branch
from nlslab.modulation import (
    CSV_HEADER,
    J0,
    StabilityData,
    carrier_data,
    decompose,
    forcing,
    lambda_matrix,
    modulation_matrices,
    modulation_rhs,
    ode_consistency,
    radiation_discrete_part,
    random_bump,
    r_operator,
    stability_data,
    stability_experiment,
)
from nlslab.spectral_core import projector_continuous, projector_point

from conftest import random_field


@pytest.fixture(scope="module")
def branch(well_small):
    return chebyshev_branch(well_small, 0.02, 0.09, 14)


@pytest.fixture(scope="module")
def tiny_branch(well_small):
    return chebyshev_branch(well_small, 1e-5, 1e-4, 8)


def _pc_field(ctx, seed, smooth=3.0):
    g = ctx.grid
    u = random_field(np.random.default_rng(seed), g.n_points, smooth=smooth, grid=g) * np.exp(-(g.x**2) / 8)
    u = projector_continuous(ctx, u)
    return u / g.norm(u)


# --- decomposition --------------------------------------------------------------


def test_decompose_exact_ground_state(well_small, branch):
    Q, _, _, _ = branch.evaluate(0.07)
    st = decompose(well_small, branch, Q)
    assert abs(st.z - 0.07) <= 1e-10
    assert np.max(np.abs(st.eta)) <= 1e-10


def test_decompose_round_trip(well_small, branch):
    g = well_small.grid
    z = 0.06 * np.exp(0.4j)
    Rw, _ = r_operator(well_small, branch, z, _pc_field(well_small, 1))
    Q, _, _, _ = branch.evaluate(z)
    st = decompose(well_small, branch, Q + 1e-3 * Rw)
    assert abs(st.z - z) <= 1e-9
    assert np.max(np.abs(st.eta - 1e-3 * Rw)) <= 1e-9
    assert g.norm(st.eta - 1e-3 * Rw) <= 1e-9


def test_decompose_generic_data(well_small, branch):
    g = well_small.grid
    data = stability_data(well_small, 3, z0=0.05)
    psi = data.initial(branch) + 1e-4 * random_field(np.random.default_rng(2), g.n_points, 2.0, g)
    st = decompose(well_small, branch, psi)
    assert np.max(np.abs(st.orth_residual)) <= 1e-10
    Q, _, _, _ = branch.evaluate(st.z)
    assert np.max(np.abs(Q + st.eta - psi)) <= 1e-12
    assert st.alpha_coeff == pytest.approx(g.integrate(st.eta * well_small.phi0))


def test_decompose_initial_guess_irrelevant(well_small, branch):
    data = stability_data(well_small, 4, z0=0.05)
    psi = data.initial(branch)
    ref = decompose(well_small, branch, psi).z
    for f in (0.8, 1.2):
        assert abs(decompose(well_small, branch, psi, z_init=f * ref).z - ref) <= 1e-9


def test_decompose_outside_branch(well_small, branch):
    Q, _, _, _ = branch.evaluate(0.05)
    with pytest.raises(ValidationError, match="outside the branch range"):
        decompose(well_small, branch, 3 * Q)


def test_nu_subtracts_linear_part(well_small, branch):
    data = stability_data(well_small, 5, z0=0.05, eps=1e-3)
    st = decompose(well_small, branch, data.initial(branch), linear_part=data.eps * data.u_omega)
    g = well_small.grid
    ref = projector_continuous(well_small, st.eta) - data.eps * data.u_omega
    assert g.norm(st.nu - ref) <= 1e-15


# --- R(z) and the matrices ------------------------------------------------------


def test_r_operator_identity_at_origin(well_small, branch):
    u = _pc_field(well_small, 6)
    Ru, alpha = r_operator(well_small, branch, 0, u)
    assert well_small.grid.norm(Ru - u) <= 1e-10 and abs(alpha) <= 1e-10


def test_r_operator_orthogonality_and_scaling(well_small, branch):
    from nlslab.modulation import orthogonality_residual

    g = well_small.grid
    u = _pc_field(well_small, 7)
    zs = np.linspace(0.025, 0.085, 7)
    alphas = []
    for z in zs:
        Ru, alpha = r_operator(well_small, branch, z, u)
        _, d1, d2, _ = branch.evaluate(z)
        assert np.max(np.abs(orthogonality_residual(g, Ru, d1, d2))) <= 1e-10
        alphas.append(abs(alpha))
    slope = np.polyfit(np.log(zs), np.log(alphas), 1)[0]
    assert abs(slope - 2) <= 0.3


def test_r_operator_rejects_point_component(well_small, branch):
    with pytest.raises(ValidationError):
        r_operator(well_small, branch, 0.05, well_small.phi0.astype(complex))


def test_lambda_at_origin_is_symplectic(well_small, branch):
    assert np.array_equal(lambda_matrix(well_small, branch, 0), J0)


def test_A_small_z_limit(well_small, tiny_branch):
    # with the real pairing and (d1, d2) -> (phi0, i phi0) the limit is -J0 = [[0, 1], [-1, 0]]
    A = modulation_matrices(well_small, tiny_branch, 2e-5).A
    assert np.max(np.abs(A + J0)) <= 1e-8


def test_A_deviation_is_quadratic(well_small, branch):
    dev = [np.max(np.abs(modulation_matrices(well_small, branch, z).A + J0)) for z in (0.03, 0.06)]
    # at eta = 0 the first-order corrections lie in Ran P_c, orthogonal to phi0, so the
    # deviation is |z|^4, inside the O(|z|^2) allowance
    assert dev[1] / dev[0] == pytest.approx(16.0, rel=0.1)
    assert dev[1] <= 0.06**2


# --- modulation right side ------------------------------------------------------


def test_soliton_is_gauge_stationary(well_small, branch):
    rhs = modulation_rhs(well_small, branch, 0.05, np.zeros(well_small.grid.n_points, dtype=complex))
    assert rhs.w == 0 and rhs.mdot == 0 and rhs.forcing_norm == 0


def test_ill_conditioned_A_rejected(well_small, branch):
    eta = 1e-3 * _pc_field(well_small, 8)
    with pytest.raises(NumericalError, match="ill-conditioned"):
        modulation_rhs(well_small, branch, 0.05, eta, max_condition=0.5)


def test_forcing_is_quadratic_in_eta(well_small, branch):
    g = well_small.grid
    Q, _, _, _ = branch.evaluate(0.05)
    eta = _pc_field(well_small, 9)
    ratios = [g.norm(forcing(Q, s * eta)) / s**2 for s in (1e-1, 1e-2, 1e-3)]
    assert max(ratios) / min(ratios) < 2.0
    # the cubic term fades: the quadratic coefficient is approached linearly in s
    assert ratios[1] / ratios[2] == pytest.approx(1.0, abs=0.05)


def test_forcing_variants(well_small, branch):
    g = well_small.grid
    Q, _, _, _ = branch.evaluate(0.05)
    eta = 1e-2 * _pc_field(well_small, 10)
    exact = forcing(Q, eta)
    proj = forcing(Q, eta, "projected", well_small)
    assert g.norm(proj - projector_continuous(well_small, exact)) <= 1e-15
    shown = forcing(Q, eta, "displayed", well_small)
    assert g.norm(shown - proj) > 1e-3 * g.norm(proj)
    with pytest.raises(ValidationError):
        forcing(Q, eta, "linear")


# --- data -----------------------------------------------------------------------


def test_random_bump_properties(well_small):
    g = well_small.grid
    b = random_bump(well_small, 1e-3, 11)
    assert g.norm(b) == pytest.approx(1e-3, rel=1e-12)
    assert g.norm(projector_point(well_small, b)) <= 1e-15
    assert np.array_equal(b, random_bump(well_small, 1e-3, 11))
    assert not np.array_equal(b, random_bump(well_small, 1e-3, 12))
    with pytest.raises(ValidationError):
        random_bump(well_small, -1.0, 0)


def test_carrier_is_unit_and_continuous(well_small):
    u = carrier_data(well_small)
    assert well_small.grid.norm(u) == pytest.approx(1.0)
    assert well_small.grid.norm(projector_point(well_small, u)) <= 1e-14


# --- experiments ----------------------------------------------------------------


def _zero_data(ctx, z0):
    n = ctx.grid.n_points
    return StabilityData(complex(z0), np.zeros(n, dtype=complex), np.zeros(n, dtype=complex), 0.0)


def test_soliton_fixed_point_run(well_small, branch):
    cfg = EvolutionConfig(dt=1e-3, t_final=20.0, stride=500)
    rec = stability_experiment(well_small, branch, _zero_data(well_small, 0.05), cfg)
    assert not rec.truncated
    assert np.max(np.abs(rec.m - 0.05)) <= 1e-5
    rad = radiation_discrete_part(well_small, branch, rec)
    assert rad["decreased"]


def test_gauge_consistency_and_m_inversion(well_small, branch):
    cfg = EvolutionConfig(dt=2e-3, t_final=1.0, stride=25)
    data = stability_data(well_small, 1, z0=0.05)
    theta = 0.9
    rot = StabilityData(data.z0 * np.exp(1j * theta), data.bump * np.exp(1j * theta),
                        data.u_omega * np.exp(1j * theta), data.eps)
    a = stability_experiment(well_small, branch, data, cfg)
    b = stability_experiment(well_small, branch, rot, cfg)
    assert np.max(np.abs(b.z - a.z * np.exp(1j * theta))) <= 1e-10
    assert np.max(np.abs(np.abs(b.m) - np.abs(a.m))) <= 1e-10
    assert np.max(np.abs(b.int_mdot - a.int_mdot)) <= 1e-10
    assert np.max(np.abs(a.m * np.exp(-1j * a.phase) - a.z)) <= 1e-12


def test_record_diagnostics(well_small, branch):
    cfg = EvolutionConfig(dt=1e-3, t_final=2.0, stride=10)
    rec = stability_experiment(well_small, branch, stability_data(well_small, 2, z0=0.05), cfg)
    assert np.all(np.diff(rec.times) > 0)
    assert np.all(np.diff(rec.int_mdot) >= 0)
    assert np.max(rec.orth_residual) <= 1e-10
    C = ode_consistency(rec, cfg.dt)
    assert np.isfinite(C) and C * (cfg.dt**2 + 1e-10) < 1e-4
    rows = list(rec.csv_rows())
    assert len(rows) == rec.times.size and len(rows[0]) == len(CSV_HEADER)
    assert rec.tail_variation(rec.times[-1]) == 0.0
    assert rec.tail_integral(0.0) == pytest.approx(rec.int_mdot[-1])
    assert rec.z_plus() == rec.m[-1]
    assert [i[:2] for i in rec.increments] == [(1.0, 2.0)]


def test_radiation_bound_audit(well_small, branch):
    cfg = EvolutionConfig(dt=2e-3, t_final=2.0, stride=25)
    rec = stability_experiment(well_small, branch, stability_data(well_small, 3, z0=0.05), cfg)
    rad = radiation_discrete_part(well_small, branch, rec)
    assert rad["series"].shape == rec.times.shape
    # P_p eta is controlled by the pairing of its continuous part with D_z Q
    assert np.isfinite(rad["bound_constant"]) and rad["bound_constant"] <= 10.0


def test_experiment_rejects_plain_dict(well_small, branch):
    with pytest.raises(ValidationError):
        stability_experiment(well_small, branch, _zero_data(well_small, 0.05), {"dt": 1e-3})
