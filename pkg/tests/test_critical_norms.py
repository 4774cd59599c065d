import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlslab.critical_norms import (
    DiscretePath,
    adapted_norm,
    critical_weighted_constant,
    duality_lower_bound,
    duality_pairing,
    duality_supremum,
    jump_norm_bound,
    norm_entry,
    q_variation,
    q_variation_bruteforce,
    weighted_spacetime_norm,
    x_norm,
)
from nlslab.errors import ValidationError
from nlslab.evolution import linear_path, local_smoothing_ratio
from nlslab.spectral_core import apply_function, block_multiplier, dyadic_range, projector_continuous, sobolev_norm

from conftest import random_field


def _path(values, zero_prefix=True):
    v = np.asarray(values, dtype=float)
    return DiscretePath(np.arange(v.shape[0], dtype=float), v, zero_prefix)


# --- DiscretePath ---------------------------------------------------------------


def test_path_validation():
    with pytest.raises(ValidationError):
        DiscretePath([0.0, 0.0], np.zeros((2, 1)))
    with pytest.raises(ValidationError):
        DiscretePath([0.0, 1.0], np.zeros((3, 1)))
    with pytest.raises(ValidationError):
        DiscretePath([0.0], np.array([[np.nan]]))
    with pytest.raises(ValidationError):
        DiscretePath([0.0], np.zeros((1, 1)), metric=0.0)
    with pytest.raises(ValidationError):
        DiscretePath([0.0], np.zeros((1, 2, 2)))


def test_effective_points():
    p = _path([1.0, 2.0])
    assert p.n_effective == 3 and p.points[0, 0] == 0.0
    assert _path([1.0, 2.0], zero_prefix=False).n_effective == 2


# --- q-variation ----------------------------------------------------------------


def test_up_and_down_path():
    assert q_variation(_path([0, 1, 0], zero_prefix=False), 2) == pytest.approx(np.sqrt(2), abs=1e-15)


@pytest.mark.parametrize("q", [1.0, 1.5, 2.0, 4.0])
def test_monotone_path_costs_one_jump(q):
    assert q_variation(_path(np.linspace(0, 1, 9), zero_prefix=False), q) == pytest.approx(1.0, abs=1e-14)


def test_constant_path_is_zero():
    assert q_variation(_path(np.full(5, 3.0), zero_prefix=False), 2) == 0.0
    # with the implicit zero the constant path costs exactly one jump
    assert q_variation(_path(np.full(5, 3.0)), 2) == pytest.approx(3.0)


def test_q_below_one_rejected():
    with pytest.raises(ValidationError):
        q_variation(_path([0, 1]), 0.5)
    with pytest.raises(ValidationError):
        q_variation(_path([1.0], zero_prefix=False), 2)


def test_dp_matches_bruteforce_on_random_paths():
    rng = np.random.default_rng(0)
    for trial in range(500):
        n = int(rng.integers(1, 10))
        dim = int(rng.integers(1, 4))
        v = rng.standard_normal((n, dim)) + 1j * rng.standard_normal((n, dim))
        zero = bool(trial % 2) or n == 1
        path = DiscretePath(np.arange(n, dtype=float), v, zero)
        q = float(rng.choice([1.0, 1.5, 2.0, 3.0, 6.0]))
        assert q_variation(path, q) == pytest.approx(q_variation_bruteforce(path, q), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=9), st.floats(1.0, 3.0), st.floats(0.0, 3.0))
def test_monotone_in_q_and_dominates_sup(values, q1, dq):
    path = _path(values)
    q2 = q1 + dq
    v1, v2 = q_variation(path, q1), q_variation(path, q2)
    assert v2 <= v1 * (1 + 1e-12) + 1e-12
    assert path.sup_norm() <= v2 * (1 + 1e-12) + 1e-12


def test_bruteforce_size_limit():
    with pytest.raises(ValidationError):
        q_variation_bruteforce(_path(np.arange(17.0)), 2)


# --- adapted and X norms --------------------------------------------------------


@pytest.fixture(scope="module")
def smooth_u0(well_small):
    g = well_small.grid
    u = np.exp(-g.x**2 / 4) * np.exp(1j * g.x)
    return projector_continuous(well_small, u)


def test_linear_solution_costs_one_jump(well_small, smooth_u0):
    times = np.linspace(0, 3, 13)
    path = DiscretePath.from_fields(well_small.grid, times, linear_path(well_small, smooth_u0, times))
    for s in (0.0, 0.5, 1.0):
        ref = sobolev_norm(well_small, smooth_u0, s, "distorted")
        assert adapted_norm(well_small, path, 2.0, "H", s) == pytest.approx(ref, rel=1e-10)
    no_zero = DiscretePath(times, path.vectors, False, path.metric)
    assert adapted_norm(well_small, no_zero, 2.0) <= 1e-12


def test_free_generator_pullback(free_small):
    g = free_small.grid
    u0 = np.exp(-g.x**2 / 2).astype(complex)
    times = np.linspace(0, 1, 6)
    path = DiscretePath.from_fields(g, times, linear_path(free_small, u0, times, generator="H0"))
    assert adapted_norm(free_small, path, 2.0, "H0") == pytest.approx(g.norm(u0), rel=1e-12)
    with pytest.raises(ValidationError):
        adapted_norm(free_small, path, 2.0, "Hx")


def test_refinement_does_not_change_linear_norm(well_small, smooth_u0):
    vals = []
    for n in (5, 9, 33):
        times = np.linspace(0, 2, n)
        path = DiscretePath.from_fields(well_small.grid, times, linear_path(well_small, smooth_u0, times))
        vals.append(adapted_norm(well_small, path, 2.0, "H", 0.5))
    assert max(vals) - min(vals) <= 1e-10 * vals[0]


def test_forced_path_stable_under_refinement(well_small, smooth_u0):
    g = well_small.grid
    lam = well_small.eigenvalues
    c0 = well_small.coefficients(smooth_u0)
    f = projector_continuous(well_small, np.exp(-g.x**2).astype(complex))
    cf = well_small.coefficients(f)
    vals = []
    for n in (21, 41, 81):
        times = np.linspace(0, 2, n)
        # exact Duhamel for a time-independent source: -i int_0^t e^{-i(t-s)H} f ds
        duh = np.where(lam != 0, (np.exp(-1j * np.outer(times, lam)) - 1) / np.where(lam != 0, lam, 1), -1j * times[:, None])
        rows = well_small.synthesize((np.exp(-1j * np.outer(times, lam)) * c0 + duh * cf).T).T
        vals.append(adapted_norm(well_small, DiscretePath.from_fields(g, times, rows), 2.0))
    assert np.all(np.isfinite(vals))
    assert vals[2] >= vals[1] >= vals[0] - 1e-12  # grid V^q only grows under refinement
    assert (vals[2] - vals[1]) <= (vals[1] - vals[0]) + 1e-12
    assert vals[2] <= g.norm(smooth_u0) + 2 * g.norm(f) + 1e-9


def test_x_norm_single_block(well_small):
    g = well_small.grid
    N = 4
    u = apply_function(well_small, block_multiplier(N), projector_continuous(well_small, np.exp(-g.x**2 / 4).astype(complex)))
    times = np.linspace(0, 1, 5)
    path = DiscretePath.from_fields(g, times, linear_path(well_small, u, times))
    total, blocks = x_norm(well_small, path, d=3, include_low=False, return_blocks=True)
    # the block function leaks into the neighbours, so combine them with their weights
    expected = np.sqrt(sum(N_**1 * blocks[N_] ** 2 for N_ in blocks))
    assert total == pytest.approx(expected, rel=1e-12)
    assert blocks[N] == pytest.approx(g.norm(apply_function(well_small, block_multiplier(N), u)), rel=1e-10)


def test_x_norm_zero_path(well_small):
    g = well_small.grid
    path = DiscretePath.from_fields(g, [0.0, 1.0], np.zeros((2, g.n_points), dtype=complex))
    assert x_norm(well_small, path) == 0.0


def test_x_norm_dominates_adapted_up_to_lp_constant(well_small):
    g = well_small.grid
    times = np.linspace(0, 2, 11)
    ratios = []
    for seed in range(5):
        u = projector_continuous(well_small, random_field(np.random.default_rng(seed), g.n_points, 2.0, g))
        path = DiscretePath.from_fields(g, times, linear_path(well_small, u, times))
        # d = 2 gives unit weights, so the comparison is the plain LP almost orthogonality
        ratios.append(x_norm(well_small, path, d=2) / adapted_norm(well_small, path, 2.0))
    assert min(ratios) >= 0.5 and max(ratios) <= 2.0
    assert len(dyadic_range(well_small)) >= 3


# --- duality pairing ------------------------------------------------------------


def test_pairing_telescopes_against_constant():
    rng = np.random.default_rng(1)
    u = DiscretePath([0.0, 1.0, 2.0], rng.standard_normal((3, 2)) + 0j)
    c = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    B = duality_pairing(u, np.tile(c, (3, 1)))
    assert B == pytest.approx(np.sum(u.vectors[-1] * np.conj(c)), abs=1e-14)


def test_pairing_single_jump():
    phi = np.array([1.0, 2.0j])
    u = DiscretePath([0.0, 1.0], np.vstack([phi, phi]))
    v = np.array([[5.0, 5.0], [1.0j, 3.0]])
    assert duality_pairing(u, v) == pytest.approx(np.sum(phi * np.conj(v[0])))


def test_pairing_rejects_bad_inputs():
    u = DiscretePath([0.0, 1.0], np.ones((2, 2)), zero_prefix=False)
    with pytest.raises(ValidationError):
        duality_pairing(u, np.ones((2, 2)))
    with pytest.raises(ValidationError):
        duality_pairing(np.ones((2, 2)), np.ones((2, 2)))
    ok = DiscretePath([0.0, 1.0], np.ones((2, 2)))
    with pytest.raises(ValidationError):
        duality_pairing(ok, np.ones((3, 2)))


def test_pairing_bounded_by_jumps():
    rng = np.random.default_rng(2)
    u = DiscretePath([0.0, 1.0, 2.0], rng.standard_normal((3, 3)) + 0j)
    bound = jump_norm_bound(u)
    for _ in range(50):
        v = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        sup = np.sqrt(np.max(np.sum(np.abs(v) ** 2, axis=1)))
        assert abs(duality_pairing(u, v)) <= bound * sup * (1 + 1e-12)


def test_random_search_reproduces_supremum():
    rng = np.random.default_rng(3)
    u = DiscretePath([0.0, 1.0, 2.0], rng.standard_normal((3, 1)) + 0j)
    lower, witness = duality_lower_bound(u, 100_000, seed=0)
    sup, v_opt = duality_supremum(u)
    assert q_variation(witness, 2.0) == pytest.approx(1.0, rel=1e-10)
    assert q_variation(v_opt, 2.0) <= 1.0 + 1e-6
    assert lower <= sup * (1 + 1e-6)
    assert lower >= 0.95 * sup


# --- weighted space-time norms --------------------------------------------------


def test_weighted_norm_zero_and_ground_state(well_small):
    g = well_small.grid
    times = np.linspace(0, 2, 11)
    assert weighted_spacetime_norm(well_small, (times, np.zeros((11, g.n_points)))) == 0.0
    rows = linear_path(well_small, well_small.phi0.astype(complex), times)
    assert weighted_spacetime_norm(well_small, (times, rows)) <= 1e-12
    assert weighted_spacetime_norm(well_small, (times, rows), project=False) > 0.1


def test_weighted_norm_matches_local_smoothing(well_small, smooth_u0):
    horizon, dt = 4.0, 0.05
    times = np.linspace(0.0, horizon, int(round(horizon / dt)) + 1)
    rows = linear_path(well_small, smooth_u0, times)
    w = weighted_spacetime_norm(well_small, (times, rows), 1.0, -0.6)
    ratio = local_smoothing_ratio(well_small, smooth_u0, horizon, eps=0.1, dt=dt)
    assert w**2 / sobolev_norm(well_small, smooth_u0, 0.5, "flat") ** 2 == pytest.approx(ratio, rel=1e-10)


def test_critical_weighted_constant_bounded(well_small, smooth_u0):
    reps = [critical_weighted_constant(well_small, smooth_u0, T) for T in (2.0, 4.0, 8.0)]
    for rep in reps:
        assert np.isfinite(rep.constant) and rep.sigma == -0.6
        assert any("grid V^q" in n for n in rep.notes)
    # the adapted part is the data norm, and the weighted part saturates in time
    assert reps[0].adapted == pytest.approx(reps[0].data_norm, rel=1e-10)
    assert reps[2].constant <= 1.5 * reps[1].constant
    with pytest.raises(ValidationError):
        critical_weighted_constant(well_small, well_small.phi0, 1.0)


def test_norm_entry_labels():
    e = norm_entry("q_variation", 1.5, q=2)
    assert e == {"norm": "q_variation", "label": "grid V^q", "params": {"q": 2}, "value": 1.5}
    assert norm_entry("weighted", 2)["label"] == "weighted"
