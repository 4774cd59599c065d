"""Small nonlinear ground states Q(z) = z phi0 + q(z), E(z) = e0 + e(z).

The discrete problem solved here is

    H Q + |Q|^2 Q = E Q,

so that e^{-itE} Q solves i psi_t = H psi + |psi|^2 psi.  Projecting on phi0 and
on Ran P_c gives the fixed point

    e z = int phi0 N(Q),     (H - e0 - e) q = -P_c N(Q),     N(u) = |u|^2 u,

iterated at real z = r > 0.  Complex z follows from Q(r e^{it}) = e^{it} Q(r).

Derivatives in the real coordinates z = z1 + i z2 are taken at real r, where
d_{z1} Q = phi0 + a(r) is real and d_{z2} Q = i (phi0 + b(r)) is imaginary;
(a, d_{z1} e) solve a bordered linear system and b an unbordered one.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg
from scipy.interpolate import BarycentricInterpolator

from nlslab.errors import ConvergenceError, NumericalError, ValidationError
from nlslab.spectral_core import h2_norm


def nonlinearity(u):
    return np.abs(u) ** 2 * u


@dataclass
class GroundState:
    z: complex
    Q: np.ndarray
    E: float
    e: float
    q: np.ndarray  # real profile at |z|
    iterations: int
    residual: float


def elliptic_residual(ctx, Q, E):
    """||H Q + |Q|^2 Q - E Q|| / ||Q|| using the dense matrix directly."""
    nQ = ctx.grid.norm(Q)
    if nQ == 0.0:
        return 0.0
    r = ctx.hamiltonian @ Q + nonlinearity(Q) - E * Q
    return ctx.grid.norm(r) / nQ


def _continuous_basis(ctx):
    if ctx.negative_indices.size != 1:
        raise ValidationError(
            f"ground-state branch needs exactly one negative eigenvalue, found {ctx.negative_indices.size}"
        )
    # eigenvalues are sorted, so the continuous part is every column after the first
    return ctx.eigenvectors[:, 1:], ctx.eigenvalues[1:]


def solve_ground_state(ctx, z, init=None, tol=1e-12, max_iter=200, branch_radius=0.5):
    """Fixed-point solve for Q(z), E(z); returns a GroundState."""
    r = abs(z)
    if r > branch_radius:
        raise ValidationError(f"|z|={r:g} exceeds the branch radius {branch_radius:g}")
    e0 = ctx.require_simple_ground_state()
    phi0 = ctx.phi0
    n = ctx.grid.n_points
    if r == 0.0:
        zero = np.zeros(n)
        return GroundState(0j, zero.astype(complex), e0, 0.0, zero, 0, 0.0)

    Uc, lam_c = _continuous_basis(ctx)
    h = ctx.grid.spacing
    q = np.zeros(n) if init is None else np.real(np.asarray(init, dtype=complex))
    e = 0.0
    update = np.inf
    for it in range(1, max_iter + 1):
        Q = r * phi0 + q
        NQ = nonlinearity(Q)
        e_new = h * np.dot(phi0, NQ) / r
        denom = lam_c - e0 - e_new
        if np.min(np.abs(denom)) < 1e-12:
            raise NumericalError("H - e0 - e is singular on Ran P_c")
        q_new = -(Uc @ ((Uc.T @ NQ) / denom))
        scale = max(np.max(np.abs(q_new)), np.finfo(float).tiny)
        update = max(np.max(np.abs(q_new - q)) / scale, abs(e_new - e) / max(abs(e_new), 1e-300))
        q, e = q_new, e_new
        if update < tol:
            break
    else:
        Q = r * phi0 + q
        raise ConvergenceError(
            f"ground-state iteration did not converge at |z|={r:g}",
            residual=elliptic_residual(ctx, Q, e0 + e),
        )
    Q = r * phi0 + q
    E = e0 + e
    res = elliptic_residual(ctx, Q, E)
    phase = z / r
    return GroundState(complex(z), phase * Q, E, e, q, it, res)


@dataclass
class BranchDerivative:
    a: np.ndarray   # d_{z1} q at real r (real field)
    b: np.ndarray   # d_{z2} q = i b at real r
    de1: float
    de2: float
    consistency: float  # imaginary scalar identity residual e = int phi0 Q^2 (phi0 + b)


def differentiate_branch(ctx, gs):
    """Exact (D_zQ, D_ze) at a converged real-z sample via bordered solves."""
    r = abs(gs.z)
    e0 = ctx.e0
    phi0 = ctx.phi0
    h = ctx.grid.spacing
    n = ctx.grid.n_points
    if r == 0.0:
        zero = np.zeros(n)
        return BranchDerivative(zero, zero.copy(), 0.0, 0.0, 0.0)
    Uc, lam_c = _continuous_basis(ctx)
    Q = r * phi0 + gs.q
    Q2 = Q * Q
    e = gs.e
    dvec = lam_c - e0 - e
    m = Uc.shape[1]

    # direction z1: unknowns (alpha, de1) with a = Uc alpha; the bordered matrix
    # is [[D + 3G, -Uc^T q], [-h (3 Q^2 phi0)^T Uc, r]] with G = Uc^T diag(Q^2) Uc
    cq = Uc.T @ gs.q
    w3 = 3.0 * Q2 * phi0

    def bordered(x):
        a = Uc @ x[:m]
        out = np.empty(m + 1)
        out[:m] = dvec * x[:m] + 3.0 * (Uc.T @ (Q2 * a)) - cq * x[m]
        out[m] = -h * np.dot(w3, a) + r * x[m]
        return out

    rhs = np.empty(m + 1)
    rhs[:m] = -(Uc.T @ w3)
    rhs[m] = h * np.dot(w3, phi0) - e
    sol = _krylov(bordered, rhs, np.concatenate([dvec, [r]]), f"bordered system at |z|={r:g}")
    a = Uc @ sol[:m]
    de1 = float(sol[m])

    # direction z2: b solves (H - e0 - e + P_c Q^2) b = -P_c Q^2 phi0, d_{z2} e = 0
    def plain(x):
        return dvec * x + Uc.T @ (Q2 * (Uc @ x))

    beta = _krylov(plain, -(Uc.T @ (Q2 * phi0)), dvec, f"system for d_z2 q at |z|={r:g}")
    b = Uc @ beta
    consistency = abs(e - h * np.dot(phi0 * Q2, phi0 + b))
    return BranchDerivative(a, b, de1, 0.0, float(consistency))


def _krylov(matvec, rhs, diag, label, rtol=1e-14):
    """GMRES with a diagonal preconditioner; the systems are small perturbations of diag."""
    if np.min(np.abs(diag)) < 1e-12:
        raise NumericalError(f"singular {label}")
    size = rhs.size
    A = scipy.sparse.linalg.LinearOperator((size, size), matvec=matvec, dtype=float)
    M = scipy.sparse.linalg.LinearOperator((size, size), matvec=lambda v: v / diag, dtype=float)
    x, info = scipy.sparse.linalg.gmres(A, rhs, M=M, rtol=rtol, atol=0.0, restart=60, maxiter=20)
    resid = np.linalg.norm(matvec(x) - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if info != 0 and resid > 1e-11:
        raise NumericalError(f"singular or ill-conditioned {label} (residual {resid:.2e})")
    return x


def finite_difference_derivative(ctx, r, step=None):
    """Centered differences of (q, e) in the modulus, for cross-checks."""
    step = 1e-4 * r if step is None else step
    plus = solve_ground_state(ctx, r + step)
    minus = solve_ground_state(ctx, r - step)
    dq = (plus.q - minus.q) / (2 * step)
    de = (plus.e - minus.e) / (2 * step)
    return dq, de


# ---------------------------------------------------------------------------
# branch


def chebyshev_nodes(lo, hi, count):
    k = np.arange(count)
    x = np.cos(np.pi * (2 * k + 1) / (2 * count))
    return np.sort(0.5 * (lo + hi) + 0.5 * (hi - lo) * x)


@dataclass
class GroundStateBranch:
    """Sampled family r -> (q, e, d_{z1} q, d_{z2} q / i, d_{z1} e)."""

    moduli: np.ndarray
    q: np.ndarray
    e: np.ndarray
    a: np.ndarray
    b: np.ndarray
    de: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray
    phi0: np.ndarray
    e0: float
    nodes: str = "log"
    _interp: object = field(default=None, repr=False)

    def __len__(self):
        return len(self.moduli)

    @property
    def E(self):
        return self.e0 + self.e

    def Q(self, i):
        return self.moduli[i] * self.phi0 + self.q[i]

    def dQ(self, i):
        """(d_{z1} Q, d_{z2} Q) at the real sample i."""
        return self.phi0 + self.a[i], 1j * (self.phi0 + self.b[i])

    @property
    def range(self):
        return float(self.moduli[0]), float(self.moduli[-1])

    def _interpolant(self):
        if self._interp is None:
            if self.nodes != "chebyshev":
                raise ValidationError("interpolation needs a branch built on Chebyshev nodes")
            r = self.moduli
            stacked = np.concatenate(
                [self.q, self.a, self.b, self.e[:, None], self.de[:, None]], axis=1
            )
            # scipy permutes the nodes at random when forming the weights; fix the
            # generator so interpolated values are bit-reproducible
            self._interp = BarycentricInterpolator(r, stacked, axis=0, rng=np.random.default_rng(0))
        return self._interp

    def profile(self, r):
        """Interpolated (q, a, b, e, de) at modulus r inside the branch range."""
        lo, hi = self.range
        if not (lo <= r <= hi):
            raise ValidationError(f"|z|={r:g} outside the branch range [{lo:g}, {hi:g}]")
        vals = self._interpolant()(r)
        n = self.phi0.size
        return vals[:n], vals[n:2 * n], vals[2 * n:3 * n], float(vals[3 * n]), float(vals[3 * n + 1])

    def evaluate(self, z):
        """Q(z), d_{z1}Q(z), d_{z2}Q(z), E(z) for complex z (gauge covariant)."""
        r = abs(z)
        q, a, b, e, _ = self.profile(r)
        phase = z / r
        c, s = phase.real, phase.imag
        Qr = r * self.phi0 + q
        dr = self.phi0 + a
        Q_over_r = self.phi0 + b
        Q = phase * Qr
        d1 = phase * (c * dr - 1j * s * Q_over_r)
        d2 = phase * (s * dr + 1j * c * Q_over_r)
        return Q, d1, d2, self.e0 + e

    def energy(self, r):
        return self.e0 + self.profile(r)[3]

    def second_derivatives(self, z, step=None):
        """Centered differences of (d_{z1}Q, d_{z2}Q) in z1 and z2; returns D[j][k]."""
        r = abs(z)
        h = 1e-3 * r if step is None else step
        lo, hi = self.range
        if r - h < lo or r + h > hi:
            raise ValidationError("second-derivative stencil leaves the branch range")
        _, d1p, d2p, _ = self.evaluate(z + h)
        _, d1m, d2m, _ = self.evaluate(z - h)
        _, d1pi, d2pi, _ = self.evaluate(z + 1j * h)
        _, d1mi, d2mi, _ = self.evaluate(z - 1j * h)
        D11 = (d1p - d1m) / (2 * h)
        D22 = (d2pi - d2mi) / (2 * h)
        D12 = 0.5 * ((d2p - d2m) / (2 * h) + (d1pi - d1mi) / (2 * h))
        return [[D11, D12], [D12, D22]]


def build_branch(ctx, moduli, nodes="log"):
    """Solve and differentiate at every modulus; returns an immutable-by-convention branch."""
    moduli = np.asarray(sorted(moduli), dtype=float)
    if moduli[0] <= 0:
        raise ValidationError("branch moduli must be positive")
    n = ctx.grid.n_points
    m = moduli.size
    q = np.empty((m, n))
    a = np.empty((m, n))
    b = np.empty((m, n))
    e = np.empty(m)
    de = np.empty(m)
    its = np.empty(m, dtype=int)
    res = np.empty(m)
    init = None
    for i, r in enumerate(moduli):
        gs = solve_ground_state(ctx, r, init=init)
        der = differentiate_branch(ctx, gs)
        q[i], e[i], its[i], res[i] = gs.q, gs.e, gs.iterations, gs.residual
        a[i], b[i], de[i] = der.a, der.b, der.de1
        init = gs.q * (moduli[min(i + 1, m - 1)] / r) ** 3
    return GroundStateBranch(moduli, q, e, a, b, de, its, res, ctx.phi0.copy(), ctx.e0, nodes)


def log_branch(ctx, lo=1e-3, hi=1e-1, count=8):
    return build_branch(ctx, np.geomspace(lo, hi, count), nodes="log")


def chebyshev_branch(ctx, lo, hi, count=14):
    return build_branch(ctx, chebyshev_nodes(lo, hi, count), nodes="chebyshev")


# ---------------------------------------------------------------------------
# scaling fits


def _slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def scaling_report(branch, grid):
    """Log-log slopes of ||q||_{H^2}, ||D_z q||_{H^2}, |e|, |D_z e| against |z|."""
    if len(branch) < 6:
        raise ValidationError("scaling fits need at least 6 branch samples")
    z = branch.moduli
    q_h2 = np.array([h2_norm(grid, qi) for qi in branch.q])
    dq_h2 = np.array([np.hypot(h2_norm(grid, ai), h2_norm(grid, bi)) for ai, bi in zip(branch.a, branch.b)])
    return {
        "q_H2": _slope(z, q_h2),
        "Dzq_H2": _slope(z, dq_h2),
        "e": _slope(z, np.abs(branch.e)),
        "Dze": _slope(z, np.abs(branch.de)),
        # D_zQ - J phi0 is D_zq; recorded separately from the unshifted D_zQ
        "DzQ_minus_Jphi0_H2": _slope(z, dq_h2),
    }


def weighted_report(branch, grid, k):
    if k not in (1, 2):
        raise ValidationError("weight exponent k must be 1 or 2")
    if len(branch) < 6:
        raise ValidationError("scaling fits need at least 6 branch samples")
    z = branch.moduli
    wq = np.array([h2_norm(grid, qi, weight=k) for qi in branch.q])
    wdq = np.array([np.hypot(h2_norm(grid, ai, weight=k), h2_norm(grid, bi, weight=k))
                    for ai, bi in zip(branch.a, branch.b)])
    return {"q": _slope(z, wq), "Dzq": _slope(z, wdq)}
