"""Linear propagators, the Strang-split cubic NLS, and estimate sweeps.

Global-in-time statements are probed on finite windows [0, horizon]; the
sweeps record the same quantity at a doubled horizon so finiteness can be
judged from stability of the value rather than asserted.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from nlslab.errors import NumericalError, ValidationError
from nlslab.spectral_core import (
    apply_function,
    japanese,
    lp_block,
    projector_continuous,
    projector_point,
    sobolev_norm,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvolutionConfig:
    dt: float = 1e-3
    t_final: float = 1.0
    stride: int = 10
    scheme: str = "strang"
    mu: float = 1.0
    projection: str = "full"
    dealias: bool = False
    norm_bearing: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt!r}")
        if not self.t_final >= self.dt:
            raise ValidationError("t_final must be at least dt")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValidationError("stride must be a positive integer")
        if self.scheme != "strang":
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if self.projection not in ("full", "continuous-projected"):
            raise ValidationError(f"unknown projection mode {self.projection!r}")
        if self.norm_bearing and self.stride * self.dt > 0.05 + 1e-12:
            raise ValidationError("norm-bearing runs need stride*dt <= 0.05")

    @property
    def n_steps(self):
        n = int(round(self.t_final / self.dt))
        if abs(n * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValidationError("t_final must be an integer multiple of dt")
        return n


@dataclass
class Trajectory:
    times: np.ndarray
    fields: np.ndarray
    mass: np.ndarray
    energy: np.ndarray
    sup_norm: np.ndarray
    dt: float
    scheme: str
    margin: float
    config: EvolutionConfig = field(default=None, repr=False)

    def __len__(self):
        return len(self.times)

    @property
    def mass_drift(self):
        return float(np.max(np.abs(self.mass - self.mass[0])) / self.mass[0])

    @property
    def energy_drift(self):
        return float(np.max(np.abs(self.energy - self.energy[0])) / max(abs(self.energy[0]), 1e-300))


# ---------------------------------------------------------------------------
# linear flows


def linear_propagate(ctx, t, u, generator="H"):
    """e^{-itH} u (eigenbasis) or e^{-itH0} u (FFT); exact for the discrete operator."""
    if generator == "H":
        return apply_function(ctx, lambda lam: np.exp(-1j * t * lam), u)
    if generator == "H0":
        return ctx.grid.apply_flat(lambda lam: np.exp(-1j * t * lam), u)
    raise ValidationError(f"unknown generator {generator!r}")


def linear_path(ctx, u, times, generator="H"):
    """Rows e^{-it_k G} u for every t_k."""
    times = np.asarray(times, dtype=float)
    if generator == "H":
        c = ctx.coefficients(u)
        phases = np.exp(-1j * np.outer(times, ctx.eigenvalues))
        return ctx.synthesize((phases * c).T).T
    if generator == "H0":
        uh = np.fft.fft(u)
        phases = np.exp(-1j * np.outer(times, ctx.grid.k**2))
        return np.fft.ifft(phases * uh, axis=1)
    raise ValidationError(f"unknown generator {generator!r}")


def free_gaussian(x, t, width=1.0, x0=0.0, k0=0.0):
    """Closed-form solution of i u_t = -u_xx with u(0) = exp(-(x-x0)^2/(2w^2) + i k0 x)."""
    w2 = width**2
    a = w2 + 2j * t
    xs = x - x0 - 2 * k0 * t
    return np.sqrt(w2 / a) * np.exp(-(xs**2) / (2 * a) + 1j * k0 * (x - x0) - 1j * k0**2 * t + 1j * k0 * x0)


# ---------------------------------------------------------------------------
# nonlinear flow


def mass(grid, psi):
    return float(grid.integrate(np.abs(psi) ** 2))


def energy(ctx, psi, mu=1.0):
    """(1/2) int |psi_x|^2 + V |psi|^2 + (mu/2) |psi|^4, conserved by the flow."""
    g = ctx.grid
    psi_x = g.derivative(psi)
    dens = np.abs(psi_x) ** 2 + ctx.V * np.abs(psi) ** 2 + 0.5 * mu * np.abs(psi) ** 4
    return float(0.5 * g.integrate(dens))


def effective_kmax(grid, psi, rel=1e-8):
    power = np.abs(np.fft.fft(psi))
    big = power > rel * power.max(initial=0.0)
    return float(np.max(np.abs(grid.k[big]), initial=0.0))


def wraparound_margin(grid, psi, horizon):
    """2L - 2 k_eff T: positive when no resolved component can cross the box."""
    return 2 * grid.half_length - 2 * effective_kmax(grid, psi) * horizon


def _dealias_mask(grid):
    return np.abs(grid.k) <= (2.0 / 3.0) * grid.k_max


def _rk4_projected(ctx, psi, dt, mu):
    def rhs(u):
        return -1j * mu * projector_continuous(ctx, np.abs(u) ** 2 * u)

    k1 = rhs(psi)
    k2 = rhs(psi + 0.5 * dt * k1)
    k3 = rhs(psi + 0.5 * dt * k2)
    k4 = rhs(psi + dt * k3)
    return psi + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def nls_evolve(ctx, psi0, config, backward=False, callback=None):
    """Strang splitting for i psi_t = H psi + mu |psi|^2 psi (or its P_c projection).

    Full mode: half kinetic step (FFT), exact pointwise step
    psi <- psi exp(-i dt (V + mu |psi|^2)), half kinetic step.
    Projected mode: half steps of e^{-itH} and an RK4 step of i psi_t = mu P_c(|psi|^2 psi).
    ``backward=True`` integrates with step -dt.
    """
    g = ctx.grid
    dt = -config.dt if backward else config.dt
    n_steps = config.n_steps
    stride = int(config.stride)
    mu = config.mu
    psi = np.array(psi0, dtype=complex)
    margin = wraparound_margin(g, psi, config.t_final)
    if margin <= 0:
        log.warning("wrap-around margin %.3g <= 0: box too small for t_final", margin)

    n_out = n_steps // stride + 1
    times = np.empty(n_out)
    fields = np.empty((n_out, g.n_points), dtype=complex)
    masses = np.empty(n_out)
    energies = np.empty(n_out)
    sups = np.empty(n_out)

    def record(j, t, u):
        times[j] = t
        fields[j] = u
        masses[j] = mass(g, u)
        energies[j] = energy(ctx, u, mu)
        sups[j] = np.max(np.abs(u))
        if callback is not None:
            callback(t, u)

    record(0, 0.0, psi)
    mask = _dealias_mask(g) if config.dealias else None
    if config.projection == "full":
        half = np.exp(-0.5j * dt * g.k**2)
        if mask is not None:
            half = half * mask
        V = ctx.V
        for step in range(1, n_steps + 1):
            psi = np.fft.ifft(half * np.fft.fft(psi))
            psi = psi * np.exp(-1j * dt * (V + mu * (psi.real**2 + psi.imag**2)))
            psi = np.fft.ifft(half * np.fft.fft(psi))
            if step % stride == 0:
                if not np.all(np.isfinite(psi)):
                    raise NumericalError(f"non-finite field at t={step * dt:.6g} (last valid {(step - stride) * dt:.6g})")
                record(step // stride, step * dt, psi)
    else:
        half = np.exp(-0.5j * dt * ctx.eigenvalues)
        for step in range(1, n_steps + 1):
            psi = ctx.synthesize(half * ctx.coefficients(psi))
            psi = _rk4_projected(ctx, psi, dt, mu)
            psi = ctx.synthesize(half * ctx.coefficients(psi))
            if step % stride == 0:
                if not np.all(np.isfinite(psi)):
                    raise NumericalError(f"non-finite field at t={step * dt:.6g}")
                record(step // stride, step * dt, psi)
    return Trajectory(times, fields, masses, energies, sups, config.dt, config.scheme, margin, config)


def order_of_convergence(ctx, psi0, t_final, dt, mu=1.0):
    """Sup errors at dt, dt/2 against a Richardson reference from dt/4, dt/8."""
    finals = []
    for k in range(4):
        h = dt / 2**k
        cfg = EvolutionConfig(dt=h, t_final=t_final, stride=int(round(t_final / h)), mu=mu)
        finals.append(nls_evolve(ctx, psi0, cfg).fields[-1])
    ref = (4 * finals[3] - finals[2]) / 3
    errs = [np.max(np.abs(f - ref)) for f in finals[:3]]
    return errs, errs[0] / errs[1], errs[1] / errs[2]


# ---------------------------------------------------------------------------
# space-time norms and estimate sweeps


def trapezoid_weights(times):
    times = np.asarray(times, dtype=float)
    w = np.zeros_like(times)
    if times.size > 1:
        dt = np.diff(times)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
    return w


def spacetime_norm(grid, rows, times, q, r):
    """||u||_{L^q_t L^r_x} with trapezoid weights in t."""
    rows = np.asarray(rows)
    if r == np.inf:
        inner = np.max(np.abs(rows), axis=1)
    else:
        inner = (grid.spacing * np.sum(np.abs(rows) ** r, axis=1)) ** (1.0 / r)
    w = trapezoid_weights(times)
    if q == np.inf:
        return float(inner.max())
    return float(np.sum(w * inner**q) ** (1.0 / q))


def admissible(q, r, d):
    """2/q + d/r = d/2 with q, r >= 2."""
    if q < 2 or r < 2:
        return False
    lhs = (0.0 if q == np.inf else 2.0 / q) + (0.0 if r == np.inf else d / r)
    return abs(lhs - d / 2) < 1e-12


def strichartz_ratio(ctx, u0, q, r, horizon, dt=0.05):
    """||e^{-itH} P_c u0||_{L^q_t L^r_x([0, horizon])} / ||u0||_2."""
    if not admissible(q, r, ctx.d):
        raise ValidationError(f"(q, r)=({q}, {r}) violates 2/q + d/r = d/2 with d={ctx.d}")
    nrm = ctx.grid.norm(u0)
    if nrm == 0:
        raise ValidationError("zero data")
    pc = projector_continuous(ctx, u0)
    times = np.linspace(0.0, horizon, int(round(horizon / dt)) + 1)
    rows = linear_path(ctx, pc, times)
    return spacetime_norm(ctx.grid, rows, times, q, r) / nrm


def _h1_weighted_sq(ctx, rows, sigma):
    """||<x>^sigma u||^2_{H^1} per row (flat H^1, weight applied first)."""
    g = ctx.grid
    w = japanese(g.x) ** sigma
    wr = rows * w
    power = np.fft.fft(wr, axis=1)
    return g.spacing / g.n_points * np.sum((1.0 + g.k**2) * np.abs(power) ** 2, axis=1)


def local_smoothing_ratio(ctx, psi0, horizon, forcing=None, eps=0.1, dt=0.05):
    """int ||P_c psi||^2_{H^{1,sigma}} / (||psi0||^2_{H^{1/2}} + int ||F||^2_{L^{2,-sigma}}).

    psi solves i psi_t - H psi = F; ``forcing`` is None (free flow) or a callable
    t -> field sampled on the time grid.  sigma = -1/2 - eps.
    """
    sigma = -0.5 - eps
    times = np.linspace(0.0, horizon, int(round(horizon / dt)) + 1)
    rows = linear_path(ctx, np.asarray(psi0, dtype=complex), times)
    f_sq = np.zeros(times.size)
    if forcing is not None:
        # Duhamel: psi(t) = e^{-itH} psi0 - i int_0^t e^{-i(t-s)H} F(s) ds, trapezoid in s
        F = np.array([forcing(t) for t in times])
        coeff = ctx.coefficients(F.T).T.astype(complex)  # rows: spectral coefficients of F(t_k)
        lam = ctx.eigenvalues
        acc = np.zeros(lam.size, dtype=complex)
        duh = np.zeros(coeff.shape, dtype=complex)
        for k in range(1, times.size):
            h = times[k] - times[k - 1]
            # int_{t_{k-1}}^{t_k} e^{isH} F(s) ds, accumulated in the interaction picture
            acc = acc + 0.5 * h * (np.exp(1j * times[k - 1] * lam) * coeff[k - 1] + np.exp(1j * times[k] * lam) * coeff[k])
            duh[k] = np.exp(-1j * times[k] * lam) * acc
        rows = rows - 1j * ctx.synthesize(duh.T).T
        wF = F * japanese(ctx.grid.x) ** (-sigma)
        f_sq = ctx.grid.spacing * np.sum(np.abs(wF) ** 2, axis=1)
    pc_rows = rows - (projector_point(ctx, rows.T).T)
    num = float(np.sum(trapezoid_weights(times) * _h1_weighted_sq(ctx, pc_rows, sigma)))
    den = sobolev_norm(ctx, psi0, 0.5, "flat") ** 2 + float(np.sum(trapezoid_weights(times) * f_sq))
    if den == 0:
        raise ValidationError("zero denominator in local smoothing ratio")
    return num / den


def dispersive_decay_slope(ctx, u0, t_lo=1.0, t_hi=50.0, n_times=40, project=True):
    """Fit of log ||e^{-itH} u||_inf against log t."""
    u = projector_continuous(ctx, u0) if project else np.asarray(u0, dtype=complex)
    times = np.geomspace(t_lo, t_hi, n_times)
    if ctx.is_free:
        rows = linear_path(ctx, u, times, generator="H0")
    else:
        rows = linear_path(ctx, u, times, generator="H")
    sup = np.max(np.abs(rows), axis=1)
    slope = np.polyfit(np.log(times), np.log(sup), 1)[0]
    return float(slope), times, sup


def bilinear_sweep(ctx, N_list, M_list, n_samples, horizon=None, horizon_factor=6.0, seed=0,
                   envelope=(2.0, 0.5), steps_per_unit=40, generator=None, max_resample=20):
    """Normalized space-time L^2 norms of products of dyadic linear waves.

    For each (N, M) and sample: u = Delta_N(envelope * noise), v = Delta_M(...),
    both normalized in L^2, evolved over t in [-T, T] with T = horizon if given,
    otherwise T = horizon_factor / M (the interaction time of the faster wave).
    Returns a dict with per-pair mean/max of the normalized ratio
    ||u(t) v(t)||_{L^2_{t,x}} / (N^{(d-1)/2} M^{-1/2}) and the raw norms.
    """
    g = ctx.grid
    d = ctx.d
    rng = np.random.default_rng(seed)
    generator = generator or ("H0" if ctx.is_free else "H")
    flavor = "flat" if generator == "H0" else "distorted"
    table = {}
    rejected = 0
    for N in N_list:
        for M in M_list:
            if N > M:
                raise ValidationError("bilinear sweep needs N <= M")
            T = horizon if horizon is not None else horizon_factor / M
            nt = int(np.ceil(2 * T * steps_per_unit * M)) + 1
            times = np.linspace(-T, T, nt)
            propagate = _path_propagator(ctx, times, generator)
            norms = []
            for s in range(n_samples):
                for attempt in range(max_resample + 1):
                    u0 = _random_packet(g, rng, envelope[0])
                    v0 = _random_packet(g, rng, envelope[1])
                    bu = lp_block(ctx, N, u0, flavor)
                    bv = lp_block(ctx, M, v0, flavor)
                    nu, nv = g.norm(bu), g.norm(bv)
                    if nu > 1e-12 and nv > 1e-12:
                        break
                    rejected += 1
                else:
                    raise NumericalError(f"could not draw nonempty blocks at N={N}, M={M}")
                bu, bv = bu / nu, bv / nv
                val = spacetime_norm(g, propagate(bu) * propagate(bv), times, 2, 2)
                norms.append(val)
            norms = np.array(norms)
            scale = N ** ((d - 1) / 2) * M ** (-0.5)
            table[(N, M)] = {
                "norms": norms,
                "mean_ratio": float(np.mean(norms) / scale),
                "max_ratio": float(np.max(norms) / scale),
            }
    return {"table": table, "rejected": rejected}


def _path_propagator(ctx, times, generator):
    """u -> rows e^{-it_k G} u with the phase table built once for a fixed time grid."""
    if generator == "H0":
        phases = np.exp(-1j * np.outer(times, ctx.grid.k**2))
        return lambda u: np.fft.ifft(phases * np.fft.fft(u), axis=1)
    if generator == "H":
        phases = np.exp(-1j * np.outer(times, ctx.eigenvalues))
        return lambda u: ctx.synthesize((phases * ctx.coefficients(u)).T).T
    raise ValidationError(f"unknown generator {generator!r}")


def bilinear_slope(result, N):
    pairs = sorted(k for k in result["table"] if k[0] == N)
    M = np.array([p[1] for p in pairs], dtype=float)
    vals = np.array([np.mean(result["table"][p]["norms"]) for p in pairs])
    return float(np.polyfit(np.log(M), np.log(vals), 1)[0])


def _random_packet(grid, rng, width):
    noise = rng.standard_normal(grid.n_points) + 1j * rng.standard_normal(grid.n_points)
    return noise * np.exp(-0.5 * (grid.x / width) ** 2)
