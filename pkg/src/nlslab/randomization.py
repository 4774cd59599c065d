"""Wiener randomization on distorted unit frequency intervals and Monte-Carlo tail fits.

The partition is psi_n(xi) = b(xi - n), n in Z, with the published bump
b(s) = 1 - S(2|s| - 1/2) of spectral_core, applied in the signed momentum
coordinate of the eigenbasis transform.  Multipliers are diagonal in that
basis, so randomization commutes exactly with e^{-itH}.

Random coefficients come from a counter-based generator (Philox) keyed by
(seed, sample index); within a sample the coefficient of interval n is drawn
at position n - n_min, so the value of g_n for a given sample never depends on
how samples are scheduled.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.special

from nlslab.errors import ValidationError
from nlslab.scattering import build_transform
from nlslab.spectral_core import projector_continuous, projector_point, wiener_bump

log = logging.getLogger(__name__)

FAMILIES = ("complex-gaussian", "rademacher", "uniform-disc", "degenerate")


@dataclass(frozen=True)
class CoefficientLaw:
    """Mean-zero coefficient law; ``variance`` is E|g|^2."""

    family: str = "complex-gaussian"
    variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown coefficient family {self.family!r}")
        if not self.variance > 0:
            raise ValidationError("variance must be positive")

    @property
    def subgaussian_constant(self):
        """c with |E e^{gamma X}| <= e^{c gamma^2} for real gamma and X = Re g or Im g."""
        if self.family == "complex-gaussian":
            return self.variance / 4.0  # Re g ~ N(0, var/2)
        if self.family == "rademacher":
            return self.variance / 2.0  # cosh(a) <= e^{a^2/2}
        if self.family == "uniform-disc":
            # |Re g| <= R with R^2 = 2 var; bounded mean-zero variables are R^2/2-subgaussian
            return self.variance
        return 0.0

    def mgf_bound_holds(self, gammas=None):
        """Check |E e^{gamma Re g}| <= e^{c gamma^2} on a gamma grid (closed forms / quadrature)."""
        gammas = np.linspace(-5, 5, 101) if gammas is None else np.asarray(gammas)
        c = self.subgaussian_constant
        if self.family == "complex-gaussian":
            mgf = np.exp(gammas**2 * self.variance / 4.0)
        elif self.family == "rademacher":
            mgf = np.cosh(gammas * np.sqrt(self.variance))
        elif self.family == "uniform-disc":
            # Re g for g uniform on the disc of radius R: density (2/(pi R^2)) sqrt(R^2 - x^2)
            # Gauss quadrature for the weight sqrt(1 - s^2) (Chebyshev, second kind)
            R = np.sqrt(2.0 * self.variance)
            xs, w = scipy.special.roots_chebyu(200)
            mgf = (2.0 / np.pi) * np.exp(np.outer(gammas * R, xs)) @ w
        else:
            return True
        return bool(np.all(mgf <= np.exp(c * gammas**2) * (1 + 1e-12)))

    def sample(self, bitgen_seed, count):
        """Draw ``count`` coefficients from an independent Philox stream."""
        rng = np.random.Generator(np.random.Philox(key=bitgen_seed))
        v = self.variance
        if self.family == "degenerate":
            return np.ones(count, dtype=complex)
        if self.family == "complex-gaussian":
            z = rng.standard_normal((count, 2))
            return np.sqrt(v / 2.0) * (z[:, 0] + 1j * z[:, 1])
        if self.family == "rademacher":
            return np.sqrt(v) * (2.0 * rng.integers(0, 2, count) - 1.0).astype(complex)
        # uniform on the disc of radius sqrt(2 v)
        r = np.sqrt(2.0 * v) * np.sqrt(rng.random(count))
        th = 2 * np.pi * rng.random(count)
        return r * np.exp(1j * th)


def _key(seed, sample):
    """Philox key from (seed, sample index): two 64-bit words."""
    return np.array([np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF), np.uint64(sample)], dtype=np.uint64)


@dataclass
class WienerPartition:
    """Unit-interval partition of the signed momentum axis of the distorted transform."""

    transform: object
    indices: np.ndarray
    weights: np.ndarray  # (n_cubes, n_momenta): psi_n(xi_k)

    @classmethod
    def build(cls, ctx, transform=None):
        transform = build_transform(ctx, "eigenbasis") if transform is None else transform
        xi = transform.momenta
        lo = int(np.floor(xi.min())) - 1
        hi = int(np.ceil(xi.max())) + 1
        idx = np.arange(lo, hi + 1)
        w = wiener_bump(xi[None, :] - idx[:, None])
        keep = np.any(w > 0, axis=1)
        return cls(transform, idx[keep], w[keep])

    def coverage_residual(self):
        return float(np.max(np.abs(self.weights.sum(axis=0) - 1.0)))

    def pieces(self, u):
        """Momentum coefficients of M_{psi_n} u for every n (rows)."""
        c = self.transform.apply(u)
        return self.weights * c[None, :]

    def piece_fields(self, u):
        return self.transform.synthesize(self.pieces(u).T).T

    def active(self, u, rel=1e-14):
        """Cube indices (positions) carrying a non-negligible piece of u."""
        p = np.linalg.norm(self.pieces(u), axis=1)
        if p.max(initial=0.0) == 0.0:
            return np.array([], dtype=int)
        return np.flatnonzero(p > rel * p.max())


def coefficients_for(law, partition, seed, sample):
    return law.sample(_key(seed, sample), partition.indices.size)


def _continuous_part(ctx, u0):
    """(P_c u0, whether a point component was removed); rejects data with no P_c mass."""
    u0 = np.asarray(u0, dtype=complex)
    total = ctx.grid.norm(u0)
    pp = ctx.grid.norm(projector_point(ctx, u0))
    projected = pp > 1e-12 * max(total, 1e-300)
    if projected:
        log.warning("randomize: data has a point-spectrum component (%.3g); projecting", pp)
        u0 = projector_continuous(ctx, u0)
    if not ctx.grid.norm(u0) > 1e-12 * total:
        raise ValidationError("data has no spectral mass on the partition")
    return u0, bool(projected)


def randomize(ctx, u0, law, seed, partition=None, sample=0):
    """Sum_n g_n M_{psi_n}(H) u0 for the coefficient draw keyed by (seed, sample).

    Returns (u_omega, projected_flag); the flag is True when u0 carried a
    point-spectrum component that was removed.
    """
    partition = WienerPartition.build(ctx) if partition is None else partition
    u0, projected = _continuous_part(ctx, u0)
    g = coefficients_for(law, partition, seed, sample)
    out = partition.transform.synthesize(g @ partition.pieces(u0))
    return out, projected


def randomize_batch(ctx, u0, law, seed, samples, partition=None):
    """Rows u^omega for every sample index (same keys as ``randomize``)."""
    partition = WienerPartition.build(ctx) if partition is None else partition
    pieces = partition.pieces(_continuous_part(ctx, u0)[0])
    G = np.array([coefficients_for(law, partition, seed, s) for s in samples])
    return partition.transform.synthesize((G @ pieces).T).T


# ---------------------------------------------------------------------------
# tail probabilities


@dataclass
class EnsembleReport:
    seed: int
    n_samples: int
    values: np.ndarray
    lambdas: np.ndarray
    survival: np.ndarray
    slope: float = float("nan")
    intercept: float = float("nan")
    r_squared: float = float("nan")
    slope_stderr: float = float("nan")
    fit_valid: bool = False
    tail_points: int = 0
    passed: bool = False
    notes: list = field(default_factory=list)

    def csv_rows(self):
        return [(float(l), float(p), int(self.n_samples)) for l, p in zip(self.lambdas, self.survival)]


def survival_function(values, lambdas):
    v = np.sort(np.asarray(values))
    return 1.0 - np.searchsorted(v, lambdas, side="right") / v.size


def fit_tail(lambdas, survival, n_samples):
    """WLS fit of log P against lambda^2 on P in [10/n, 0.1]; weights n P / (1 - P)."""
    lambdas = np.asarray(lambdas, dtype=float)
    P = np.asarray(survival, dtype=float)
    sel = (P >= 10.0 / n_samples) & (P <= 0.1)
    out = {"tail_points": int(sel.sum())}
    if sel.sum() < 3:
        out.update(valid=False)
        return out
    x = lambdas[sel] ** 2
    y = np.log(P[sel])
    w = n_samples * P[sel] / (1.0 - P[sel])  # inverse delta-method variance of log P
    W = np.sum(w)
    xm, ym = np.sum(w * x) / W, np.sum(w * y) / W
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_res = np.sum(w * resid**2)
    ss_tot = np.sum(w * (y - ym) ** 2)
    dof = max(int(sel.sum()) - 2, 1)
    out.update(
        valid=True,
        slope=float(slope),
        intercept=float(intercept),
        r_squared=float(1 - ss_res / ss_tot) if ss_tot > 0 else 1.0,
        slope_stderr=float(np.sqrt(ss_res / dof / sxx)),
    )
    return out


class DataNorm:
    """L^r norm of the randomized datum itself."""

    def __init__(self, r=2):
        self.r = r
        self.name = f"data-L{r}"

    def prepare(self, ctx, piece_fields):
        self._grid = ctx.grid
        self._pieces = piece_fields

    def evaluate(self, G):
        fields = G @ self._pieces
        return np.array([self._grid.norm(f, self.r) for f in fields])


class SpaceTimeNorm:
    """||<sqrt H>^s e^{-itH} u^omega||_{L^q_t L^r_x} on a time grid (trapezoid in t).

    Pieces are propagated once; each sample is a linear combination of the
    propagated pieces, which is exact because the multipliers commute with
    the flow.
    """

    def __init__(self, q, r, times, s=0.0):
        self.q, self.r, self.s = q, r, s
        self.times = np.asarray(times, dtype=float)
        self.name = f"L{q}t-L{r}x-s{s:g}"

    def prepare(self, ctx, piece_fields):
        from nlslab.evolution import linear_path, trapezoid_weights

        self._grid = ctx.grid
        self._w = trapezoid_weights(self.times)
        lam = np.maximum(ctx.eigenvalues, 0.0)
        prop = []
        for p in piece_fields:
            c = ctx.coefficients(p) * (1.0 + lam) ** (self.s / 2)
            prop.append(linear_path(ctx, ctx.synthesize(c), self.times))
        self._prop = np.array(prop)  # (cubes, times, x)

    def evaluate(self, G):
        h = self._grid.spacing
        out = np.empty(G.shape[0])
        for i, g in enumerate(G):
            u = np.tensordot(g, self._prop, axes=1)
            a = np.abs(u)
            inner = a.max(axis=1) if self.r == np.inf else (h * np.sum(a**self.r, axis=1)) ** (1.0 / self.r)
            out[i] = inner.max() if self.q == np.inf else np.sum(self._w * inner**self.q) ** (1.0 / self.q)
        return out


class FieldFunctional:
    """Wraps a callable acting on a (batch, n_points) array of randomized data."""

    def __init__(self, fn, name="custom"):
        self.fn, self.name = fn, name

    def prepare(self, ctx, piece_fields):
        self._pieces = piece_fields

    def evaluate(self, G):
        return np.asarray(self.fn(G @ self._pieces))


def tail_probability_mc(ctx, u0, law, norm_functional, lambdas, n_samples, seed,
                        partition=None, batch=512, min_samples=1000):
    """Empirical survival P(norm(u^omega) > lambda) and its Gaussian-tail fit.

    ``norm_functional`` is a DataNorm, SpaceTimeNorm, FieldFunctional or a
    plain callable on (batch, n_points) arrays.  Only intervals carrying
    spectral mass of u0 are sampled; the coefficient of interval n for sample
    s is the same as in ``randomize``.
    """
    if n_samples < min_samples:
        raise ValidationError(f"n_samples must be at least {min_samples}")
    if not hasattr(norm_functional, "prepare"):
        norm_functional = FieldFunctional(norm_functional)
    partition = WienerPartition.build(ctx) if partition is None else partition
    u0 = _continuous_part(ctx, u0)[0]
    act = partition.active(u0)
    if act.size == 0:
        raise ValidationError("data has no spectral mass on the partition")
    pieces = partition.piece_fields(u0)[act]
    norm_functional.prepare(ctx, pieces)
    values = np.empty(n_samples)
    for start in range(0, n_samples, batch):
        idx = range(start, min(start + batch, n_samples))
        G = np.array([coefficients_for(law, partition, seed, s)[act] for s in idx])
        values[start:start + len(idx)] = norm_functional.evaluate(G)
    lambdas = np.asarray(lambdas, dtype=float)
    surv = survival_function(values, lambdas)
    fit = fit_tail(lambdas, surv, n_samples)
    rep = EnsembleReport(seed, n_samples, values, lambdas, surv, tail_points=fit["tail_points"])
    if not fit["valid"]:
        lo = np.quantile(values, 0.9)
        hi = np.quantile(values, 1 - 10.0 / n_samples)
        rep.notes.append(f"tail region empty; use lambda in [{lo:.4g}, {hi:.4g}]")
        if np.all(surv == 1.0):
            return rep
        raise ValidationError(rep.notes[-1])
    rep.slope, rep.intercept = fit["slope"], fit["intercept"]
    rep.r_squared, rep.slope_stderr = fit["r_squared"], fit["slope_stderr"]
    rep.fit_valid = True
    rep.passed = rep.slope < 0
    return rep


def tail_grid(values_hint, count=40):
    """A lambda grid spanning the upper decile of a pilot sample."""
    v = np.sort(np.asarray(values_hint))
    return np.linspace(np.quantile(v, 0.5), v[-1], count)


# ---------------------------------------------------------------------------
# Khinchin


@dataclass
class KhinchinReport:
    p: float
    ratios: np.ndarray
    moments: np.ndarray

    @property
    def max_ratio(self):
        return float(self.ratios.max())


def khinchin_check(law, coefficients, p, n_samples, seed):
    """(E|sum g_n c_n|^p)^{1/p} / (sqrt(p) ||c||_2) for each coefficient row."""
    c = np.atleast_2d(np.asarray(coefficients, dtype=complex))
    if p < 1:
        raise ValidationError("Khinchin exponent must be >= 1")
    ratios, moments = [], []
    for i, row in enumerate(c):
        G = law.sample(_key(seed, i), n_samples * row.size).reshape(n_samples, row.size)
        sums = G @ row
        m = np.mean(np.abs(sums) ** p)
        moments.append(m)
        ratios.append(m ** (1.0 / p) / (np.sqrt(p) * np.linalg.norm(row)))
    return KhinchinReport(float(p), np.array(ratios), np.array(moments))
