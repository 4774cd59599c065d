"""Periodic 1-D discretization of H = -d^2/dx^2 + V and its functional calculus.

The kinetic part is the Fourier symbol k^2 on the periodic box [-L, L), so the
dense Hamiltonian and the FFT-based free propagator are the same operator.
Everything that needs the spectrum of H goes through one dense, symmetric
eigendecomposition computed once per context.

Cutoff functions
----------------
All frequency cutoffs are built from the quintic smoothstep

    S(t) = 0 (t <= 0),  6t^5 - 15t^4 + 10t^3 (0 < t < 1),  1 (t >= 1)

which satisfies S(t) + S(1 - t) = 1.  From it:

* ``radial_bump(r) = 1 - S(r - 1)``: equal to 1 on [0, 1], 0 beyond 2.
* ``lp_cutoff(r) = radial_bump(r) - radial_bump(2r)``: supported in [1/2, 2],
  equal to 1 at r = 1.
* ``wiener_bump(s) = 1 - S(2|s| - 1/2)``: equal to 1 on |s| <= 1/4, 0 for
  |s| >= 3/4, and sum_n wiener_bump(s - n) = 1 for every real s.

A Littlewood-Paley block at dyadic frequency N applies ``lp_cutoff(sqrt(lam+)/N)``
to the operator (lam+ = max(lam, 0)), so negative eigenvalues only ever land in
the low block ``radial_bump(2 sqrt(lam+))``.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from nlslab.errors import NumericalError, ValidationError

NEGATIVE_TOL = 1e-8


# ---------------------------------------------------------------------------
# cutoffs


def smoothstep(t):
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def radial_bump(r):
    return 1.0 - smoothstep(np.abs(np.asarray(r, dtype=float)) - 1.0)


def lp_cutoff(r):
    r = np.asarray(r, dtype=float)
    return radial_bump(r) - radial_bump(2.0 * r)


def wiener_bump(s):
    return 1.0 - smoothstep(2.0 * np.abs(np.asarray(s, dtype=float)) - 0.5)


def is_dyadic(N):
    try:
        n = int(N)
    except (TypeError, ValueError):
        return False
    return n == N and n >= 1 and (n & (n - 1)) == 0


def _check_dyadic(N, name="N"):
    if not is_dyadic(N):
        raise ValidationError(f"{name}={N!r} is not a dyadic integer (1, 2, 4, ...)")
    return int(N)


def japanese(x):
    return np.sqrt(1.0 + np.asarray(x, dtype=float) ** 2)


# ---------------------------------------------------------------------------
# grid and potential


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid on [-L, L) with ``n_points`` nodes."""

    half_length: float
    n_points: int

    def __post_init__(self):
        n = self.n_points
        if not isinstance(n, (int, np.integer)) or n < 8 or (n & (n - 1)) != 0:
            raise ValidationError(f"n_points must be a power of two >= 8, got {n!r}")
        if not np.isfinite(self.half_length) or self.half_length <= 0:
            raise ValidationError(f"half_length must be positive, got {self.half_length!r}")

    @property
    def spacing(self):
        return 2.0 * self.half_length / self.n_points

    @cached_property
    def x(self):
        return -self.half_length + self.spacing * np.arange(self.n_points)

    @cached_property
    def k(self):
        """Angular wave numbers in FFT order."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n_points, d=self.spacing)

    @property
    def k_max(self):
        return np.pi / self.spacing

    # discrete L^p machinery, quadrature weight h

    def inner(self, u, v):
        """Complex L^2 inner product (u, v) = int u conj(v) dx."""
        return self.spacing * np.vdot(v, u)

    def real_inner(self, u, v):
        """Real inner product <u, v> = Re int u conj(v) dx."""
        return float(np.real(self.inner(u, v)))

    def norm(self, u, p=2):
        u = np.abs(np.asarray(u))
        if p == np.inf:
            return float(u.max(initial=0.0))
        return float((self.spacing * np.sum(u**p)) ** (1.0 / p))

    def integrate(self, f):
        return self.spacing * np.sum(f)

    def apply_flat(self, f, u):
        """Fourier multiplier f(k^2), i.e. f(H0) for the periodic free operator."""
        return np.fft.ifft(f(self.k**2) * np.fft.fft(u))

    def derivative(self, u, order=1):
        return np.fft.ifft((1j * self.k) ** order * np.fft.fft(u))


@dataclass(frozen=True)
class PotentialSpec:
    """A real potential: a named family or tabulated samples.

    Families: ``zero``; ``sech2`` (-depth * sech^2(x / width)); ``gaussian``
    (-depth * exp(-x^2 / (2 width^2))); ``tabulated`` (``samples`` given on the
    grid nodes).
    """

    kind: str = "sech2"
    depth: float = 2.0
    width: float = 1.0
    samples: tuple = field(default=None, repr=False)

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "sech2":
            e = np.exp(-2.0 * np.abs(x / self.width))  # sech^2 without cosh overflow
            return -self.depth * 4.0 * e / (1.0 + e) ** 2
        if self.kind == "gaussian":
            return -self.depth * np.exp(-0.5 * (x / self.width) ** 2)
        if self.kind == "tabulated":
            if self.samples is None or len(self.samples) != x.size:
                raise ValidationError("tabulated potential does not match the grid size")
            return np.asarray(self.samples, dtype=float)
        raise ValidationError(f"unknown potential kind {self.kind!r}")

    def decay_ratio(self, grid, eps=0.1):
        """max over the outer 10% of the box of |V| <x>^(2+eps), relative to max |V|."""
        v = np.abs(self.evaluate(grid.x))
        vmax = v.max(initial=0.0)
        if vmax == 0.0:
            return 0.0
        edge = np.abs(grid.x) >= 0.9 * grid.half_length
        return float(np.max(v[edge] * japanese(grid.x[edge]) ** (2 + eps)) / vmax)

    def derivative_bound(self, grid, order=2):
        v = self.evaluate(grid.x)
        return float(np.max(np.abs(np.real(grid.derivative(v, order)))))


ZERO_POTENTIAL = PotentialSpec(kind="zero")


# ---------------------------------------------------------------------------
# operator context


@dataclass(frozen=True, eq=False)
class OperatorContext:
    """Grid + potential + (lazily) the dense eigendecomposition of H.

    Eigenvectors are orthonormal in the Euclidean sense; spectral coefficients
    of a field u are ``eigenvectors.T @ u``.  The L^2-normalized ground state
    function is ``phi0`` (positive, ``int phi0^2 dx = 1``).
    """

    grid: Grid1D
    potential: PotentialSpec
    d: int = 1

    @cached_property
    def V(self):
        v = self.potential.evaluate(self.grid.x)
        if not np.all(np.isfinite(v)):
            raise ValidationError("potential samples contain NaN or inf")
        return v

    @property
    def is_free(self):
        return not np.any(self.V)

    @cached_property
    def hamiltonian(self):
        n = self.grid.n_points
        symbol = self.grid.k**2
        column = np.real(np.fft.ifft(symbol))
        lap = scipy.linalg.circulant(column)
        h = lap + np.diag(self.V)
        return 0.5 * (h + h.T)

    @cached_property
    def _eig(self):
        try:
            lam, vec = np.linalg.eigh(self.hamiltonian)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"eigensolver failed: {exc}") from exc
        # fix the sign of every eigenvector: largest-magnitude entry positive
        idx = np.argmax(np.abs(vec), axis=0)
        signs = np.sign(vec[idx, np.arange(vec.shape[1])])
        vec = vec * signs
        return lam, vec

    @property
    def eigenvalues(self):
        return self._eig[0]

    @property
    def eigenvectors(self):
        return self._eig[1]

    @cached_property
    def negative_indices(self):
        return np.flatnonzero(self.eigenvalues < -NEGATIVE_TOL)

    @cached_property
    def continuous_indices(self):
        return np.flatnonzero(self.eigenvalues >= -NEGATIVE_TOL)

    @property
    def e0(self):
        if self.negative_indices.size == 0:
            raise ValidationError("H has no negative eigenvalue")
        return float(self.eigenvalues[0])

    @cached_property
    def phi0(self):
        """Ground state eigenfunction, positive, L^2-normalized on the grid."""
        if self.negative_indices.size == 0:
            raise ValidationError("H has no negative eigenvalue")
        v = self.eigenvectors[:, 0] / np.sqrt(self.grid.spacing)
        return v if v.sum() > 0 else -v

    def require_simple_ground_state(self):
        neg = self.negative_indices
        if neg.size != 1:
            raise ValidationError(
                f"expected exactly one negative eigenvalue, found {neg.size}"
            )
        return self.e0

    def coefficients(self, u):
        return _real_matmul(self.eigenvectors.T, np.asarray(u))

    def synthesize(self, c):
        return _real_matmul(self.eigenvectors, np.asarray(c))

    def gram_residual(self):
        U = self.eigenvectors
        return float(np.max(np.abs(U.T @ U - np.eye(U.shape[1]))))

    def spectral_gap_check(self, eps0=1e-3):
        """True when no eigenvalue lies in (-eps0, eps0) (zero-resonance proxy)."""
        return bool(np.all(np.abs(self.eigenvalues) >= eps0))


def _real_matmul(M, u):
    """M @ u for real M without promoting M to complex."""
    if np.iscomplexobj(u):
        # .real/.imag are strided views; copy so the product goes through BLAS
        return (M @ np.ascontiguousarray(u.real)) + 1j * (M @ np.ascontiguousarray(u.imag))
    return M @ u


def build_operator(grid, potential, d=1, diagonalize=True):
    """Assemble H on ``grid``; eigendecompose immediately unless told otherwise.

    Pass ``diagonalize=False`` for large grids used only with FFT-based free
    propagation; the eigendecomposition is then computed on first use.
    """
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ValidationError(f"dimension parameter d must be a positive integer, got {d!r}")
    ctx = OperatorContext(grid=grid, potential=potential, d=int(d))
    ctx.V  # validates samples
    if diagonalize:
        ctx._eig
    return ctx


# ---------------------------------------------------------------------------
# functional calculus


def _check_field(ctx, u):
    u = np.asarray(u)
    if u.shape[0] != ctx.grid.n_points:
        raise ValidationError(
            f"field length {u.shape[0]} does not match grid size {ctx.grid.n_points}"
        )
    return u


def projector_point(ctx, u):
    u = _check_field(ctx, u)
    idx = ctx.negative_indices
    if idx.size == 0:
        return np.zeros_like(u)
    Up = ctx.eigenvectors[:, idx]
    return Up @ (Up.T @ u)


def projector_continuous(ctx, u):
    u = _check_field(ctx, u)
    return u - projector_point(ctx, u)


def apply_function(ctx, f, u):
    """f(H) u through the eigendecomposition."""
    u = _check_field(ctx, u)
    vals = np.asarray(f(ctx.eigenvalues))
    if vals.shape != ctx.eigenvalues.shape:
        vals = np.broadcast_to(vals, ctx.eigenvalues.shape)
    if not np.all(np.isfinite(vals)):
        bad = ctx.eigenvalues[~np.isfinite(vals)][0]
        raise ValidationError(f"function is not finite at eigenvalue {bad:.6g}")
    c = ctx.coefficients(u)
    if c.ndim == 2:
        return ctx.synthesize(vals[:, None] * c)
    return ctx.synthesize(vals * c)


def function_matrix(ctx, f):
    """Dense matrix of f(H)."""
    U = ctx.eigenvectors
    return (U * f(ctx.eigenvalues)) @ U.T


def block_multiplier(N):
    """Eigenvalue function of the dyadic block at frequency N."""
    N = _check_dyadic(N)
    return lambda lam: lp_cutoff(np.sqrt(np.maximum(lam, 0.0)) / N)


def low_multiplier(lam):
    return radial_bump(2.0 * np.sqrt(np.maximum(lam, 0.0)))


def lp_block(ctx, N, u, flavor="distorted"):
    """Littlewood-Paley block at dyadic frequency N (flat: H0, distorted: H)."""
    f = block_multiplier(N)
    if flavor == "flat":
        return ctx.grid.apply_flat(f, u)
    if flavor == "distorted":
        return apply_function(ctx, f, u)
    raise ValidationError(f"unknown flavor {flavor!r}")


def lp_low(ctx, u, flavor="distorted"):
    if flavor == "flat":
        return ctx.grid.apply_flat(low_multiplier, u)
    if flavor == "distorted":
        return apply_function(ctx, low_multiplier, u)
    raise ValidationError(f"unknown flavor {flavor!r}")


def dyadic_range(ctx):
    """Dyadic N with a nonempty block on the grid, i.e. N/2 < k_max."""
    out = []
    N = 1
    while N / 2 < ctx.grid.k_max * 1.0001:
        out.append(N)
        N *= 2
    return out


def lp_decomposition(ctx, u, flavor="distorted"):
    """Low block followed by all dyadic blocks; they sum to u."""
    blocks = [lp_low(ctx, u, flavor)]
    blocks += [lp_block(ctx, N, u, flavor) for N in dyadic_range(ctx)]
    return blocks


def square_function(ctx, u, flavor="distorted"):
    blocks = lp_decomposition(ctx, u, flavor)
    return np.sqrt(sum(np.abs(b) ** 2 for b in blocks))


def bernstein_ratio(ctx, N, u, flavor="distorted"):
    b = lp_block(ctx, N, u, flavor)
    nrm = ctx.grid.norm(b)
    if nrm == 0.0:
        return 0.0
    return ctx.grid.norm(b, np.inf) / (N ** (ctx.d / 2) * nrm)


def cross_localization_norm(ctx, K, N, order="flat-distorted"):
    """Largest singular value of Delta_K o tilde-Delta_N (or the reverse order)."""
    K = _check_dyadic(K, "K")
    N = _check_dyadic(N, "N")
    if order not in ("flat-distorted", "distorted-flat"):
        raise ValidationError(f"unknown order {order!r}")
    # both factors are self-adjoint, so the reversed order is the adjoint
    # and has the same operator norm
    if ctx.is_free and abs(K.bit_length() - N.bit_length()) >= 2:
        return 0.0  # H = H0 and the two symbols have disjoint supports
    U = ctx.eigenvectors
    dist = block_multiplier(N)(ctx.eigenvalues)
    sel = np.flatnonzero(dist)
    if sel.size == 0:
        return 0.0
    flat = block_multiplier(K)(ctx.grid.k**2)
    if not np.any(flat):
        return 0.0
    # F^-1 diag(flat) F U_sel diag(dist_sel) U_sel^T; the trailing U_sel^T is a
    # partial isometry onto the columns and leaves the singular values alone
    cols = np.fft.ifft(flat[:, None] * np.fft.fft(U[:, sel] * dist[sel], axis=0), axis=0)
    return float(np.linalg.svd(cols, compute_uv=False)[0])


def cross_localization_decay(ctx, N_list=None, offset=3, floor=1e-12):
    """Norms of Delta_K tilde-Delta_N over the dyadic range and the worst decay ratio.

    For each N, walking K away from N (both directions), every step beyond
    |log2 K - log2 N| = ``offset`` whose starting value is above ``floor``
    contributes the ratio next / current.  The largest such ratio is returned;
    decay of at least 10x per step means it is <= 0.1.
    """
    Ks = dyadic_range(ctx)
    N_list = Ks if N_list is None else [_check_dyadic(N) for N in N_list]
    table = {N: {K: cross_localization_norm(ctx, K, N) for K in Ks} for N in N_list}
    worst, steps = 0.0, 0
    for N, row in table.items():
        for direction in (1, -1):
            gap = offset
            while True:
                K1 = N * 2.0 ** (direction * gap)
                K2 = K1 * 2.0 ** direction
                if K1 not in row or K2 not in row or row[K1] <= floor:
                    break
                worst = max(worst, row[K2] / row[K1])
                steps += 1
                gap += 1
    return {"table": table, "worst_ratio": worst, "steps": steps, "floor": floor}


def cross_localization_matrix(ctx, K, N, order="flat-distorted"):
    """Dense matrix of the composition, for small grids and adjoint checks."""
    flat = block_multiplier(_check_dyadic(K, "K"))(ctx.grid.k**2)
    n = ctx.grid.n_points
    F = np.fft.fft(np.eye(n), axis=0)
    Finv = np.conj(F.T) / n
    flat_mat = Finv @ (flat[:, None] * F)
    dist_mat = function_matrix(ctx, block_multiplier(_check_dyadic(N, "N")))
    if order == "flat-distorted":
        return flat_mat @ dist_mat
    if order == "distorted-flat":
        return dist_mat @ flat_mat
    raise ValidationError(f"unknown order {order!r}")


def sobolev_norm(ctx, u, s=0.0, flavor="flat", weight=0.0):
    """||<D>^s (<x>^weight u)||_2 with <D> from H0 (flat) or H (distorted)."""
    u = _check_field(ctx, u)
    w = u * japanese(ctx.grid.x) ** weight if weight else u
    if s == 0:
        return ctx.grid.norm(w)
    if flavor == "flat":
        g = ctx.grid.apply_flat(lambda lam: (1.0 + lam) ** (s / 2), w)
    elif flavor == "distorted":
        if s < 0 and ctx.negative_indices.size:
            raise ValidationError("negative s is undefined for the distorted flavor when H has negative eigenvalues")
        g = apply_function(ctx, lambda lam: (1.0 + np.maximum(lam, 0.0)) ** (s / 2), w)
    else:
        raise ValidationError(f"unknown flavor {flavor!r}")
    return ctx.grid.norm(g)


def h2_norm(grid, u, weight=0):
    """Flat H^2 norm of <x>^weight u."""
    w = u * japanese(grid.x) ** weight if weight else u
    return grid.norm(grid.apply_flat(lambda lam: 1.0 + lam, w))
