"""Ground state + radiation decomposition, the modulation ODE, and stability runs.

Pairings are real: <u, v> = Re int u conj(v) dx.  Directions j = 1, 2 are the
real and imaginary parts of z, and a complex number w is identified with the
2-vector (Re w, Im w).

Writing psi = Q(z) + eta with <i eta, d_j Q(z)> = 0, the flow
i psi_t = H psi + |psi|^2 psi gives

    i eta_t = L_Q eta + F - i d_k Q (z' + i E z)_k,
    L_Q eta = (H + 2|Q|^2) eta + Q^2 conj(eta),
    F = N(Q + eta) - N(Q) - 2|Q|^2 eta - Q^2 conj(eta),

and differentiating the orthogonality conditions in time yields

    z' + i E(z) z = -A(z, eta)^{-1} <F, D_z Q>,
    A_jk = <i d_j Q, d_k Q> + <i eta, d_j d_k Q>.

The gauge m = z exp(i int E) then satisfies m' = exp(i int E) (z' + i E z).
F here is the unprojected remainder; the projected and the displayed
variants are available through ``forcing=`` for comparison.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from nlslab.errors import ConvergenceError, NumericalError, ValidationError
from nlslab.evolution import EvolutionConfig, nls_evolve
from nlslab.groundstate import nonlinearity
from nlslab.randomization import CoefficientLaw, randomize
from nlslab.spectral_core import japanese, projector_continuous, projector_point, sobolev_norm

log = logging.getLogger(__name__)

FORCINGS = ("exact", "projected", "displayed")


def pairing(grid, u, v):
    return grid.real_inner(u, v)


def _cvec(w):
    return np.array([w.real, w.imag])


@dataclass
class ModulationState:
    z: complex
    eta: np.ndarray
    nu: np.ndarray
    alpha_coeff: complex
    orth_residual: np.ndarray
    iterations: int


@dataclass
class ModulationMatrices:
    A: np.ndarray
    Lam: np.ndarray
    gamma: np.ndarray

    @property
    def condition(self):
        return float(np.linalg.cond(self.A))


J0 = np.array([[0.0, -1.0], [1.0, 0.0]])


# ---------------------------------------------------------------------------
# decomposition


def orthogonality_residual(grid, eta, d1, d2):
    ie = 1j * eta
    return np.array([pairing(grid, ie, d1), pairing(grid, ie, d2)])


def decompose(ctx, branch, psi, z_init=None, tol=1e-10, max_iter=50, linear_part=None):
    """Solve <i(psi - Q(z)), d_j Q(z)> = 0 for z by Newton's method.

    The Jacobian is <i d_j Q, d_k Q> from the branch first derivatives (the
    curvature term <i eta, d_j d_k Q> is dropped, which costs only a linear
    rate proportional to ||eta||).  Iterates until the update is below 1e-13
    relative or the residual is below ``tol``, whichever is later within
    ``max_iter``.
    """
    g = ctx.grid
    psi = np.asarray(psi, dtype=complex)
    z = complex(g.integrate(psi * ctx.phi0)) if z_init is None else complex(z_init)
    lo, hi = branch.range
    res = np.array([np.inf, np.inf])
    for it in range(1, max_iter + 1):
        r = abs(z)
        if not (lo <= r <= hi):
            raise ValidationError(f"|z|={r:.6g} outside the branch range [{lo:g}, {hi:g}]")
        Q, d1, d2, _ = branch.evaluate(z)
        eta = psi - Q
        res = orthogonality_residual(g, eta, d1, d2)
        Jac = np.array([[pairing(g, 1j * d1, d1), pairing(g, 1j * d1, d2)],
                        [pairing(g, 1j * d2, d1), pairing(g, 1j * d2, d2)]])
        step = np.linalg.solve(Jac, -res)
        z = z + complex(step[0], step[1])
        if np.max(np.abs(step)) <= 1e-13 * max(abs(z), 1e-300) and np.max(np.abs(res)) <= tol:
            break
    else:
        if not np.max(np.abs(res)) <= tol:
            raise ConvergenceError("decomposition did not converge", residual=float(np.max(np.abs(res))))
    Q, d1, d2, _ = branch.evaluate(z)
    eta = psi - Q
    res = orthogonality_residual(g, eta, d1, d2)
    if np.max(np.abs(res)) > tol:
        raise ConvergenceError("decomposition did not converge", residual=float(np.max(np.abs(res))))
    pc = projector_continuous(ctx, eta)
    nu = pc if linear_part is None else pc - linear_part
    alpha = complex(g.integrate(eta * ctx.phi0))
    return ModulationState(z, eta, nu, alpha, res, it)


# ---------------------------------------------------------------------------
# matrices and R(z)


def modulation_matrices(ctx, branch, z, eta=None):
    g = ctx.grid
    _, d1, d2, _ = branch.evaluate(z)
    D = (d1, d2)
    A = np.array([[pairing(g, 1j * D[j], D[k]) for k in range(2)] for j in range(2)])
    if eta is not None and np.any(eta):
        DD = branch.second_derivatives(z)
        A = A + np.array([[pairing(g, 1j * eta, DD[j][k]) for k in range(2)] for j in range(2)])
    Lam = lambda_matrix(ctx, branch, z)
    return ModulationMatrices(A, Lam, Lam - J0)


def lambda_matrix(ctx, branch, z):
    """Lambda_jk = <i e_k phi0, d_j Q(z)> with e_1 = 1, e_2 = i; equals J0 at z = 0."""
    g = ctx.grid
    phi0 = ctx.phi0
    if z == 0:
        d1, d2 = phi0.astype(complex), 1j * phi0
    else:
        _, d1, d2, _ = branch.evaluate(z)
    E = (1.0, 1j)
    D = (d1, d2)
    return np.array([[pairing(g, 1j * E[k] * phi0, D[j]) for k in range(2)] for j in range(2)])


def r_operator(ctx, branch, z, u, check=True):
    """R(z) u = u + alpha phi0 with <i R(z)u, d_j Q(z)> = 0 for j = 1, 2."""
    g = ctx.grid
    u = np.asarray(u, dtype=complex)
    if check and g.norm(projector_point(ctx, u)) > 1e-10 * max(g.norm(u), 1e-300):
        raise ValidationError("r_operator expects P_c-pure input")
    if z == 0:
        d1, d2 = ctx.phi0.astype(complex), 1j * ctx.phi0
    else:
        _, d1, d2, _ = branch.evaluate(z)
    Lam = lambda_matrix(ctx, branch, z)
    if abs(np.linalg.det(Lam)) < 1e-8:
        raise NumericalError("Lambda(z) is singular")
    rhs = -orthogonality_residual(g, u, d1, d2)
    a = np.linalg.solve(Lam, rhs)
    alpha = complex(a[0], a[1])
    return u + alpha * ctx.phi0, alpha


# ---------------------------------------------------------------------------
# modulation ODE


def forcing(Q, eta, variant="exact", ctx=None):
    if variant == "exact":
        return nonlinearity(Q + eta) - nonlinearity(Q) - 2 * np.abs(Q) ** 2 * eta - Q * Q * np.conj(eta)
    if variant == "projected":
        return projector_continuous(ctx, forcing(Q, eta, "exact"))
    if variant == "displayed":
        return projector_continuous(ctx, nonlinearity(Q + eta) - np.abs(Q) ** 2 * eta - Q * Q * np.conj(eta))
    raise ValidationError(f"unknown forcing variant {variant!r}")


@dataclass
class ModulationRhs:
    w: complex          # z' + i E z
    mdot: complex       # exp(i Theta) w
    A: np.ndarray
    pairing: np.ndarray
    forcing_norm: float


def modulation_rhs(ctx, branch, z, eta, phase=0.0, variant="exact", max_condition=1e3):
    """Right side of the modulation ODE at (z, eta); ``phase`` is Theta = int_0^t E."""
    g = ctx.grid
    Q, d1, d2, _ = branch.evaluate(z)
    F = forcing(Q, eta, variant, ctx)
    mats = modulation_matrices(ctx, branch, z, eta)
    cond = mats.condition
    if cond > max_condition:
        raise NumericalError(f"A(z, eta) ill-conditioned (cond={cond:.3g})")
    p = np.array([pairing(g, F, d1), pairing(g, F, d2)])
    wv = -np.linalg.solve(mats.A, p)
    w = complex(wv[0], wv[1])
    return ModulationRhs(w, np.exp(1j * phase) * w, mats.A, p, g.norm(F))


# ---------------------------------------------------------------------------
# stability experiment


@dataclass
class StabilityData:
    """psi0 = Q(z0) + bump + eps * u_omega, with u_omega P_c-pure (stored for nu)."""

    z0: complex
    bump: np.ndarray
    u_omega: np.ndarray
    eps: float

    def initial(self, branch):
        Q, _, _, _ = branch.evaluate(self.z0)
        return Q + self.bump + self.eps * self.u_omega


def _bump_rng(seed):
    return np.random.Generator(np.random.Philox(key=np.array([seed, 0xB0B], dtype=np.uint64)))


def random_bump(ctx, size, seed, k0=3.0, width=1.0, center=0.0):
    """P_c-pure modulated Gaussian of L^2 norm ``size`` with a random phase and complex amplitude.

    The profile is exp(-(x-c)^2 / 2w^2) cos(k0 (x-c) + phi) (1 + 0.5 g1 + 0.5 i g2), with phi
    uniform and g1, g2 standard normal, all drawn from a Philox stream keyed by ``seed``.
    Carrying frequency k0 keeps the bump away from the slowly dispersing zero-energy region.
    """
    if size < 0:
        raise ValidationError("bump size must be non-negative")
    g = ctx.grid
    rng = _bump_rng(seed)
    phi = rng.uniform(0.0, 2 * np.pi)
    amp = 1.0 + 0.5 * rng.standard_normal() + 0.5j * rng.standard_normal()
    y = (g.x - center) / width
    b = projector_continuous(ctx, (np.exp(-0.5 * y**2) * np.cos(k0 * width * y + phi) * amp).astype(complex))
    nb = g.norm(b)
    if nb == 0.0:
        raise NumericalError("bump has no continuous-spectrum content on this grid")
    return size * b / nb


def carrier_data(ctx, k0=3.0, width=1.0):
    """Unit-norm P_c(exp(-x^2 / 2w^2) cos(k0 x)), the deterministic profile that gets randomized."""
    g = ctx.grid
    u = projector_continuous(ctx, (np.exp(-0.5 * (g.x / width) ** 2) * np.cos(k0 * g.x)).astype(complex))
    return u / g.norm(u)


def stability_data(ctx, seed, z0=0.05, eps=1e-3, bump_size=1e-3, k0=3.0, law=None, partition=None, u0=None):
    """Assemble StabilityData: Q(z0) + random bump + eps * randomized carrier, all seeded by ``seed``."""
    if u0 is None:
        u0 = carrier_data(ctx, k0)
    u_omega, _ = randomize(ctx, u0, law or CoefficientLaw(), seed, partition)
    bump = random_bump(ctx, bump_size, seed, k0=k0)
    return StabilityData(complex(z0), bump, u_omega, float(eps))


@dataclass
class ModulationRecord:
    times: np.ndarray
    z: np.ndarray
    m: np.ndarray
    phase: np.ndarray
    energy: np.ndarray
    mdot_fd: np.ndarray
    mdot_ode: np.ndarray
    nu_h12: np.ndarray
    eta_weighted: np.ndarray
    pp_eta: np.ndarray
    pp_bound: np.ndarray
    orth_residual: np.ndarray
    increments: list = field(default_factory=list)
    truncated: bool = False
    message: str = ""
    pullback: np.ndarray = field(default=None, repr=False)

    @property
    def ode_residual(self):
        return np.abs(self.mdot_fd - self.mdot_ode)

    @property
    def int_mdot(self):
        """Cumulative trapezoid of |m'| (finite-difference)."""
        a = np.abs(self.mdot_fd)
        out = np.zeros_like(a)
        out[1:] = np.cumsum(0.5 * (a[1:] + a[:-1]) * np.diff(self.times))
        return out

    def tail_variation(self, T):
        sel = self.times >= T - 1e-12
        m = self.m[sel]
        return float(np.max(np.abs(m - m[0])))

    def tail_integral(self, T):
        I = self.int_mdot
        k = int(np.searchsorted(self.times, T - 1e-12))
        return float(I[-1] - I[k])

    def z_plus(self):
        return complex(self.m[-1])

    def csv_rows(self):
        for k in range(self.times.size):
            yield (self.times[k], self.z[k].real, self.z[k].imag, self.m[k].real, self.m[k].imag,
                   abs(self.mdot_fd[k]), abs(self.mdot_ode[k]), self.nu_h12[k], self.eta_weighted[k],
                   self.pp_eta[k])


CSV_HEADER = ("t", "re_z", "im_z", "re_m", "im_m", "abs_mdot_fd", "abs_mdot_ode",
              "nu_h12", "eta_weighted", "pp_eta")


def _dyadic_increments(ctx, times, pullback_coeffs, weight):
    """||e^{it2 H} nu(t2) - e^{it1 H} nu(t1)||_{H^{1/2}} over [1,2], [2,4], ... inside the run."""
    h = ctx.grid.spacing
    out = []
    t1 = 1.0
    while 2 * t1 <= times[-1] + 1e-9:
        k1 = int(np.argmin(np.abs(times - t1)))
        k2 = int(np.argmin(np.abs(times - 2 * t1)))
        d = pullback_coeffs[k2] - pullback_coeffs[k1]
        out.append((float(times[k1]), float(times[k2]), float(np.sqrt(h * np.sum(weight * np.abs(d) ** 2)))))
        t1 *= 2
    return out


def stability_experiment(ctx, branch, data, config, variant="exact", sigma=-0.6, keep_pullback=False):
    """Evolve psi0 = Q(z0) + bump + eps u_omega and decompose at every output time."""
    if not isinstance(config, EvolutionConfig):
        raise ValidationError("config must be an EvolutionConfig")
    g = ctx.grid
    psi0 = data.initial(branch)
    traj = nls_evolve(ctx, psi0, config)
    times = traj.times
    n_out = times.size
    lam = ctx.eigenvalues
    c_lin = ctx.coefficients(data.u_omega) * data.eps
    weight = np.sqrt(1.0 + np.maximum(lam, 0.0))  # H^{1/2} symbol squared
    pnorm_phi0 = g.norm(ctx.phi0)

    z = np.zeros(n_out, dtype=complex)
    E = np.zeros(n_out)
    w = np.zeros(n_out, dtype=complex)
    eta_w = np.zeros(n_out)
    pp = np.zeros(n_out)
    pp_bound = np.zeros(n_out)
    orth = np.zeros(n_out)
    etas = np.zeros((n_out, g.n_points), dtype=complex)
    truncated, message = False, ""
    z_prev = data.z0
    last = n_out
    for k, t in enumerate(times):
        try:
            st = decompose(ctx, branch, traj.fields[k], z_init=z_prev)
            rhs = modulation_rhs(ctx, branch, st.z, st.eta, variant=variant)
        except (ValidationError, NumericalError) as exc:
            truncated, message, last = True, f"t={t:.6g}: {exc}", k
            log.warning("stability run truncated at %s", message)
            break
        z_prev = st.z
        z[k] = st.z
        E[k] = branch.energy(abs(st.z))
        w[k] = rhs.w
        etas[k] = st.eta
        eta_w[k] = sobolev_norm(ctx, st.eta, 1.0, "flat", weight=sigma)
        pp_part = projector_point(ctx, st.eta)
        pp[k] = g.norm(pp_part)
        _, d1, d2, _ = branch.evaluate(st.z)
        pc = st.eta - pp_part
        pp_bound[k] = pnorm_phi0 * np.hypot(pairing(g, 1j * pc, d1), pairing(g, 1j * pc, d2))
        orth[k] = float(np.max(np.abs(st.orth_residual)))
    sl = slice(0, last)
    times, z, E, w = times[sl], z[sl], E[sl], w[sl]
    # nu = P_c eta - eps e^{-itH} u_omega, handled in eigen-coefficients for all samples at once
    c_nu = ctx.coefficients(etas[sl].T).T
    c_nu[:, ctx.negative_indices] = 0.0
    c_nu -= c_lin[None, :] * np.exp(-1j * np.outer(times, lam))
    pull = c_nu * np.exp(1j * np.outer(times, lam))
    nu_h12 = np.sqrt(g.spacing * np.sum(weight * np.abs(c_nu) ** 2, axis=1))
    phase = np.zeros(times.size)
    if times.size > 1:
        phase[1:] = np.cumsum(0.5 * (E[1:] + E[:-1]) * np.diff(times))
    m = z * np.exp(1j * phase)
    mdot_ode = np.exp(1j * phase) * w
    mdot_fd = np.gradient(m, times, edge_order=2) if times.size > 2 else np.zeros_like(m)
    incs = _dyadic_increments(ctx, times, pull, weight) if times.size > 1 else []
    return ModulationRecord(times, z, m, phase, E, mdot_fd, mdot_ode, nu_h12, eta_w[sl], pp[sl],
                            pp_bound[sl], orth[sl], incs, truncated, message,
                            pull if keep_pullback else None)


def radiation_discrete_part(ctx, branch, record):
    """||P_p eta(t)|| series and the eventual-decrease audit."""
    s = np.asarray(record.pp_eta)
    peak = float(s.max(initial=0.0))
    final = float(s[-1]) if s.size else 0.0
    return {
        "series": s,
        "peak": peak,
        "final": final,
        "decreased": bool(final <= 0.5 * peak) if peak > 0 else True,
        "bound_constant": float(np.max(s / np.where(record.pp_bound > 0, record.pp_bound, np.inf)))
        if s.size else 0.0,
    }


def ode_consistency(record, dt, floor=1e-10, interior=True):
    """C = max |m'_fd - m'_ode| / (dt^2 + floor) over interior samples."""
    r = record.ode_residual
    if interior and r.size > 2:
        r = r[1:-1]
    return float(r.max() / (dt**2 + floor))
