"""Generalized plane waves, the distorted Fourier transform, and wave operators.

Two constructions of the transform are provided.

eigenbasis
    Continuous eigenvectors of the discrete H, grouped into clusters of
    equal eigenvalue.  Inside each cluster the basis is rotated to
    diagonalize a windowed momentum operator w(x)(-i d/dx) w(x), where w
    vanishes on the support of V; this labels every column with a signed
    momentum xi = +-sqrt(lambda) and aligns the columns with incoming plane
    waves.  The transform is exact on the grid.

lippmann-schwinger
    For each represented energy lambda > 0 the waves e(x, +-sqrt(lambda))
    are solved from e = e^{ix xi} - G_xi * (V e) with the outgoing line
    Green's function G_xi(x) = (i / 2 xi) e^{i xi |x|}, discretized by the
    trapezoid rule with the kink correction -(h^2/12) (V e)(x) on the diagonal.
    Columns are Loewdin-orthonormalized inside each cluster.  The route needs
    the box spectrum to consist of degenerate +-xi pairs (reflectionless
    wells, or V = 0); otherwise it is reported unavailable.

Rows of a transform matrix are indexed by momentum and columns by x, with the
quadrature weight folded in so that ||F u||_2 (plain Euclidean on the momentum
side) equals ||P_c u||_{L^2}.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from nlslab.errors import BoxTooSmallError, NumericalError, ResolventError, ValidationError
from nlslab.spectral_core import apply_function, projector_continuous, smoothstep

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# limiting absorption


@dataclass
class ResolventResult:
    value: np.ndarray
    error_estimate: float
    epsilons: np.ndarray
    samples: list = field(repr=False, default_factory=list)


def resolvent_limit(ctx, lam, f, eps_schedule=None, eps0=1e-10):
    """R^+(lam) f = lim (H - lam - i eps)^{-1} f by two-term Richardson in eps.

    The default schedule is geometric, eps_k = eps_1 / 2^k for four terms, with
    eps_1 set to a fiftieth of the distance from lam to the discrete spectrum.  On
    a finite grid the limit exists whenever lam is not an eigenvalue.
    """
    if not lam > 0:
        raise ValidationError("resolvent_limit needs lam > 0")
    gaps = np.abs(ctx.eigenvalues - lam)
    j = int(np.argmin(gaps))
    if gaps[j] <= eps0:
        raise ResolventError(
            f"lam={lam:.12g} is within {eps0:g} of the eigenvalue {ctx.eigenvalues[j]:.12g}",
            nearest_eigenvalue=float(ctx.eigenvalues[j]),
        )
    if eps_schedule is None:
        eps1 = 0.02 * gaps[j]
        eps_schedule = eps1 / 2.0 ** np.arange(4)
    eps_schedule = np.asarray(eps_schedule, dtype=float)
    if eps_schedule.size < 2 or np.any(eps_schedule <= 0) or np.any(np.diff(eps_schedule) >= 0):
        raise ValidationError("eps_schedule must be a decreasing positive sequence of length >= 2")
    c = ctx.coefficients(f)
    samples = [ctx.synthesize(c / (ctx.eigenvalues - lam - 1j * e)) for e in eps_schedule]
    # first-order model R(eps) = R0 + eps R1: extrapolate from the last two terms
    e1, e2 = eps_schedule[-2], eps_schedule[-1]
    value = (e1 * samples[-1] - e2 * samples[-2]) / (e1 - e2)
    err = float(ctx.grid.norm(value - samples[-1]))
    return ResolventResult(value, err, eps_schedule, samples)


def extrapolation_defects(ctx, lam, f, eps1, count=4):
    """Distance of successive two-term extrapolants from the exact R(lam + i0) f.

    On a grid the exact limit is available from the eigenbasis, so the defect
    ratio for halved eps can be measured directly (first-order model: about 4).
    """
    exact = ctx.synthesize(ctx.coefficients(f) / (ctx.eigenvalues - lam))
    eps = eps1 / 2.0 ** np.arange(count + 1)
    c = ctx.coefficients(f)
    vals = [ctx.synthesize(c / (ctx.eigenvalues - lam - 1j * e)) for e in eps]
    defects = []
    for k in range(count):
        a, b = eps[k], eps[k + 1]
        ext = (a * vals[k + 1] - b * vals[k]) / (a - b)
        defects.append(ctx.grid.norm(ext - exact))
    return np.array(defects)


# ---------------------------------------------------------------------------
# Lippmann-Schwinger plane waves


def potential_support(ctx, rel_tol=1e-15):
    """Indices where |V| exceeds rel_tol * max |V|."""
    V = np.abs(ctx.V)
    if not np.any(V):
        return np.array([], dtype=int)
    return np.flatnonzero(V > rel_tol * V.max())


def fd_laplacian_residual(grid, e, V, xi2, margin=8):
    """Interior residual of (-d^2 + V - xi^2) e using 8th-order central differences."""
    c = np.array([-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560])
    h = grid.spacing
    n = e.size
    lo, hi = max(4, margin), n - max(4, margin)
    idx = np.arange(lo, hi)
    d2 = sum(c[j] * e[idx + j - 4] for j in range(9)) / h**2
    return -d2 + (V[idx] - xi2) * e[idx], idx


@dataclass
class PlaneWave:
    xi: float
    values: np.ndarray
    residual: float


def solve_plane_wave(ctx, xi, support=None):
    """e(x, xi) on the grid from the Lippmann-Schwinger equation (1-D outgoing kernel).

    Returns a PlaneWave with the relative interior Helmholtz residual.
    """
    if xi == 0:
        raise ValidationError("solve_plane_wave needs xi != 0")
    g = ctx.grid
    x = g.x
    h = g.spacing
    k = abs(xi)
    incident = np.exp(1j * xi * x)
    S = potential_support(ctx) if support is None else support
    if S.size == 0:
        return PlaneWave(float(xi), incident, 0.0)
    V = ctx.V
    xs = x[S]
    kern = (1j / (2 * k)) * np.exp(1j * k * np.abs(xs[:, None] - xs[None, :]))
    # trapezoid plus kink correction: int G(x-y) phi(y) dy ~ h sum G phi - (h^2/12) phi(x)
    K = h * kern - (h**2 / 12.0) * np.eye(S.size)
    system = np.eye(S.size) + K * V[S][None, :]
    try:
        lu = scipy.linalg.lu_factor(system, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"Lippmann-Schwinger system singular at xi^2={xi * xi:.12g}") from exc
    es = scipy.linalg.lu_solve(lu, incident[S])
    if not np.all(np.isfinite(es)):
        raise NumericalError(f"Lippmann-Schwinger system singular at xi^2={xi * xi:.12g}")
    phi = V[S] * es
    # extend to every node by the same quadrature
    full = incident - h * ((1j / (2 * k)) * np.exp(1j * k * np.abs(x[:, None] - xs[None, :]))) @ phi
    full[S] = es
    res, _ = fd_laplacian_residual(g, full, V, xi * xi)
    rel = float(np.sqrt(h * np.sum(np.abs(res) ** 2)) / g.norm(full))
    return PlaneWave(float(xi), full, rel)


@dataclass
class PlaneWaveTable:
    momenta: np.ndarray
    waves: np.ndarray  # shape (n_points, n_momenta)
    residuals: np.ndarray

    def __post_init__(self):
        if self.waves.shape[1] != self.momenta.size:
            raise ValidationError("plane-wave table shape does not match the momentum grid")


def plane_wave_table(ctx, momenta):
    cols, res = [], []
    S = potential_support(ctx)
    for xi in momenta:
        pw = solve_plane_wave(ctx, xi, support=S)
        cols.append(pw.values)
        res.append(pw.residual)
    return PlaneWaveTable(np.asarray(momenta, dtype=float), np.array(cols).T, np.array(res))


# ---------------------------------------------------------------------------
# distorted transform


def energy_clusters(eigenvalues, rel_tol=1e-11):
    """Split sorted eigenvalues into runs of (numerically) equal values."""
    lam = np.asarray(eigenvalues)
    if lam.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(lam) > rel_tol * np.maximum(1.0, np.abs(lam[1:])))
    bounds = np.concatenate([[0], breaks + 1, [lam.size]])
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def exterior_window(ctx, width=None):
    """Smooth window vanishing where V is non-negligible and equal to 1 far away."""
    g = ctx.grid
    S = potential_support(ctx, 1e-14)
    if S.size == 0:
        return np.ones(g.n_points)
    R = np.max(np.abs(g.x[S]))
    width = 0.5 * (g.half_length - R) if width is None else width
    if width <= 0:
        raise BoxTooSmallError("potential fills the box; no exterior region", suggested_half_length=2 * R)
    return smoothstep((np.abs(g.x) - R) / width)


@dataclass
class DistortedTransform:
    """F_V as a (momentum x space) matrix together with its momentum labels."""

    forward: np.ndarray
    momenta: np.ndarray
    energies: np.ndarray
    route: str
    grid_spacing: float
    clusters: list = field(repr=False, default_factory=list)

    @property
    def inverse(self):
        """F_V^*: momentum coefficients back to grid values."""
        return np.conj(self.forward.T) / self.grid_spacing

    def apply(self, u):
        return self.forward @ np.asarray(u)

    def synthesize(self, c):
        return self.inverse @ np.asarray(c)

    def plancherel_defect(self, ctx, u):
        return abs(np.linalg.norm(self.apply(u)) - ctx.grid.norm(projector_continuous(ctx, u)))

    def diagonalization_defect(self, ctx, u):
        hu = ctx.hamiltonian @ u
        return np.linalg.norm(self.apply(hu) - self.energies * self.apply(u)) / ctx.grid.norm(u)


def _momentum_rotation(ctx, B, window):
    """Unitary W diagonalizing w P w on span(B); returns (B W, signed eigenvalues)."""
    g = ctx.grid
    WB = window[:, None] * B
    PB = np.fft.ifft(1j * g.k[:, None] * np.fft.fft(WB, axis=0), axis=0) * (-1j)
    M = np.conj(WB.T) @ PB
    M = 0.5 * (M + np.conj(M.T))
    vals, W = np.linalg.eigh(M)
    return B @ W, vals


def _fix_phase(col, x, xi):
    """Phase making the column real and positive against e^{i xi x} on the left exterior."""
    ref = np.vdot(np.exp(1j * xi * x), col)
    if abs(ref) == 0:
        return col
    return col * (np.conj(ref) / abs(ref))


def _eigenbasis_transform(ctx, rel_tol):
    g = ctx.grid
    h = g.spacing
    cont = ctx.continuous_indices
    lam = ctx.eigenvalues[cont]
    U = ctx.eigenvectors[:, cont].astype(complex)
    window = exterior_window(ctx) if not ctx.is_free else np.ones(g.n_points)
    cols = np.empty_like(U)
    momenta = np.empty(lam.size)
    clusters = energy_clusters(lam, rel_tol)
    reflect = U[::-1].copy()
    reflect = np.roll(reflect, 1, axis=0)  # x -> -x on [-L, L)
    for cl in clusters:
        mag = np.sqrt(max(float(np.mean(lam[cl])), 0.0))
        if cl.size == 1:
            j = cl[0]
            # standing wave: label by parity (even -> +xi, odd -> -xi)
            parity = np.real(np.vdot(U[:, j], reflect[:, j]))
            sign = 1.0 if parity >= 0 else -1.0
            cols[:, j] = U[:, j]
            momenta[j] = sign * mag
            continue
        B, vals = _momentum_rotation(ctx, U[:, cl], window)
        for c_i, j in enumerate(cl):
            sign = 1.0 if vals[c_i] >= 0 else -1.0
            momenta[j] = sign * mag
            cols[:, j] = _fix_phase(B[:, c_i], g.x, momenta[j])
    forward = np.sqrt(h) * np.conj(cols.T) * 1.0
    # fold the Euclidean -> L^2 weight: (F u)_k = sqrt(h) sum conj(e_k) u
    return DistortedTransform(forward, momenta, lam.copy(), "eigenbasis", h, clusters)


def _ls_transform(ctx, rel_tol, xi_cut=None):
    g = ctx.grid
    h = g.spacing
    cont = ctx.continuous_indices
    lam = ctx.eigenvalues[cont]
    clusters = energy_clusters(lam, rel_tol)
    S = potential_support(ctx)
    cols = []
    momenta = []
    energies = []
    kept = []
    Ucont = ctx.eigenvectors[:, cont]
    for cl in clusters:
        mean = float(np.mean(lam[cl]))
        if xi_cut is not None and mean > xi_cut**2:
            continue
        if mean <= 0:
            # zero-energy column: no outgoing wave; take the eigenvector itself
            if cl.size != 1:
                raise NumericalError("route unavailable: degenerate zero-energy cluster")
            cols.append(Ucont[:, cl[0]].astype(complex))
            momenta.append(0.0)
            energies.append(mean)
            kept.append(cl)
            continue
        xi = np.sqrt(mean)
        if cl.size == 1:
            # the Nyquist mode of the box has a single standing wave
            if abs(xi - g.k_max) < 1e-9 * g.k_max:
                cols.append(Ucont[:, cl[0]].astype(complex))
                momenta.append(xi)
                energies.append(mean)
                kept.append(cl)
                continue
            raise NumericalError(
                f"route unavailable: energy {mean:.6g} is simple on the box, so the +-xi waves "
                "do not both fit the periodic box (reflecting potential)"
            )
        if cl.size != 2:
            raise NumericalError(f"route unavailable: cluster of size {cl.size} at energy {mean:.6g}")
        pair = np.column_stack([solve_plane_wave(ctx, xi, S).values, solve_plane_wave(ctx, -xi, S).values])
        # Loewdin orthonormalization (Euclidean)
        gram = np.conj(pair.T) @ pair
        w, v = np.linalg.eigh(gram)
        inv_sqrt = (v / np.sqrt(w)) @ np.conj(v.T)
        ortho = pair @ inv_sqrt
        for c_i, sgn in enumerate((1.0, -1.0)):
            cols.append(_fix_phase(ortho[:, c_i], g.x, sgn * xi))
            momenta.append(sgn * xi)
            energies.append(mean)
        kept.append(cl)
    C = np.array(cols).T
    forward = np.sqrt(h) * np.conj(C.T)
    return DistortedTransform(forward, np.array(momenta), np.array(energies), "lippmann-schwinger", h, kept)


def build_transform(ctx, route="eigenbasis", rel_tol=1e-11, xi_cut=None):
    """Distorted Fourier transform by the requested route.

    ``xi_cut`` (LS route only) restricts the transform to represented energies
    below xi_cut^2; the result is then an isometry on the corresponding
    spectral subspace.
    """
    if route == "eigenbasis":
        return _eigenbasis_transform(ctx, rel_tol)
    if route == "lippmann-schwinger":
        return _ls_transform(ctx, rel_tol, xi_cut)
    raise ValidationError(f"unknown route {route!r}")


def distorted_multiplier(ctx, transform, m, u):
    """F_V^* m(xi) F_V u for a bounded momentum-space function m."""
    vals = np.asarray(m(transform.momenta))
    vals = np.broadcast_to(vals, transform.momenta.shape)
    if not np.all(np.isfinite(vals)):
        raise ValidationError("multiplier is not finite on the momentum grid")
    return transform.synthesize(vals * transform.apply(u))


def cluster_alignment(ctx, transform_ls, transform_eig):
    """Largest distance of an LS column from the span of its matching eigen cluster."""
    U = np.conj(transform_eig.forward.T) / np.sqrt(transform_eig.grid_spacing)
    worst = 0.0
    h = transform_ls.grid_spacing
    for j, E in enumerate(transform_ls.energies):
        col = np.conj(transform_ls.forward[j]) / np.sqrt(h)
        sel = np.flatnonzero(np.abs(transform_eig.energies - E) <= 1e-9 * max(1.0, abs(E)))
        B = U[:, sel]
        resid = col - B @ (np.conj(B.T) @ col)
        worst = max(worst, float(np.linalg.norm(resid) / np.linalg.norm(col)))
    return worst


# ---------------------------------------------------------------------------
# wave operators


@dataclass
class WaveOperatorResult:
    value: np.ndarray
    increments: np.ndarray
    times: np.ndarray
    edge_amplitude: float
    transform_distance: float = None


def _edge_amplitude(grid, u, reference=None, frac=0.1):
    """L2 norm of u on the outer ``frac`` of the box, relative to ``reference``."""
    edge = np.abs(grid.x) >= (1 - frac) * grid.half_length
    ref = grid.norm(u) if reference is None else reference
    return float(np.sqrt(grid.spacing * np.sum(np.abs(u[edge]) ** 2)) / ref) if ref > 0 else 0.0


def wave_operator_transform(ctx, u, transform=None):
    """F_V^* F u: the limit t -> +inf of e^{itH} e^{-itH0} u.

    F is the free transform evaluated at the distorted momenta, and each
    plane-wave column is phased to match e^{i xi x} on its outgoing side
    (x > R for xi > 0, x < -R for xi < 0, R the potential support radius).
    """
    g = ctx.grid
    T = build_transform(ctx) if transform is None else transform
    h = g.spacing
    x = g.x
    S = potential_support(ctx, 1e-14)
    R = float(np.max(np.abs(x[S]))) if S.size else 0.0
    cols = np.conj(T.forward.T) / np.sqrt(h)
    for j, xi in enumerate(T.momenta):
        if xi == 0:
            continue
        side = x > R if xi > 0 else x < -R
        ref = np.vdot(np.exp(1j * xi * x[side]), cols[side, j])
        if abs(ref) > 0:
            cols[:, j] *= np.conj(ref) / abs(ref)
    free = (h / np.sqrt(2.0 * g.half_length)) * (np.exp(-1j * np.outer(T.momenta, x)) @ np.asarray(u, dtype=complex))
    return cols @ free / np.sqrt(h)


def wave_operator_apply(ctx, u, t_max, t_schedule=None, leak_tol=1e-2, adjoint=False,
                        reference=None, cross_check=False):
    """e^{itH} e^{-itH0} u at t = t_max (or the adjoint e^{itH0} e^{-itH} P_c u).

    Cauchy increments ||W_{t_k} u - W_{t_{k-1}} u|| over the schedule are
    recorded.  If the intermediate field carries more than ``leak_tol`` of
    ``reference`` (default ||u||) in L2 norm on the outer tenth of the box,
    BoxTooSmallError is raised, since that part is about to wrap around.
    With ``cross_check`` (forward direction only) the relative distance to
    F_V^* F u is attached.
    """
    g = ctx.grid
    if t_schedule is None:
        t_schedule = np.linspace(0.0, t_max, 6)[1:]
    t_schedule = np.asarray(t_schedule, dtype=float)
    if t_schedule[-1] != t_max:
        t_schedule = np.append(t_schedule, t_max)
    u = np.asarray(u, dtype=complex)
    ref = g.norm(u) if reference is None else float(reference)
    if adjoint:
        u = projector_continuous(ctx, u)
    values = []
    worst_edge = 0.0
    for t in t_schedule:
        if adjoint:
            mid = apply_function(ctx, lambda lam: np.exp(-1j * t * lam), u)
            edge = _edge_amplitude(g, mid, ref)
            w = g.apply_flat(lambda lam: np.exp(1j * t * lam), mid)
        else:
            mid = g.apply_flat(lambda lam: np.exp(-1j * t * lam), u)
            edge = _edge_amplitude(g, mid, ref)
            w = apply_function(ctx, lambda lam: np.exp(1j * t * lam), mid)
        worst_edge = max(worst_edge, edge)
        if edge > leak_tol:
            # free group velocity 2|k|; suggest a box that keeps the spread inside
            spread = 2.0 * _rms_wavenumber(g, u) * t
            raise BoxTooSmallError(
                f"relative amplitude {edge:.3g} reached the box edge at t={t:g}",
                suggested_half_length=float(2.0 * (g.half_length + spread)),
            )
        values.append(w)
    incs = np.array([g.norm(values[k] - values[k - 1]) for k in range(1, len(values))])
    dist = None
    if cross_check and not adjoint:
        dist = float(g.norm(values[-1] - wave_operator_transform(ctx, u)) / ref) if ref > 0 else 0.0
    return WaveOperatorResult(values[-1], incs, t_schedule, worst_edge, dist)


def _rms_wavenumber(grid, u):
    power = np.abs(np.fft.fft(u)) ** 2
    return float(np.sqrt(np.sum(grid.k**2 * power) / max(np.sum(power), 1e-300)))


def intertwining_residual(ctx, u, f, t_max, **kw):
    """||f(H) P_c u - W_t f(H0) W_t^* u|| / ||u|| at finite t."""
    g = ctx.grid
    lhs = apply_function(ctx, f, projector_continuous(ctx, u))
    ref = g.norm(u)
    ws = wave_operator_apply(ctx, u, t_max, adjoint=True, reference=ref, **kw).value
    mid = g.apply_flat(f, ws)
    rhs = wave_operator_apply(ctx, mid, t_max, reference=ref, **kw).value
    return g.norm(lhs - rhs) / g.norm(u)
