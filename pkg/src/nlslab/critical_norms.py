"""Variation norms of sampled paths and the weighted space-time norms built on them.

A path is a finite list of samples v(t_0), ..., v(t_{K-1}) in a Hilbert space.
Its q-variation is computed over sub-partitions of the sample set only, so for
a continuous-time path the value is a lower bound ("grid V^q").  With the
zero-prefix flag an implicit zero state precedes the first sample, matching
paths that vanish in the far past.

Norms of sampled fields use the grid metric: ||u||^2 = metric * sum |u_j|^2,
where ``metric`` is the grid spacing for fields in physical space.

The adapted norm ||v||_{V^q_G} is the q-variation of the pulled-back path
e^{+it G} v(t), so a free linear solution has a constant pullback and costs
exactly one jump from zero.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from nlslab.errors import ValidationError
from nlslab.evolution import Trajectory, linear_path, trapezoid_weights
from nlslab.spectral_core import (
    block_multiplier,
    dyadic_range,
    japanese,
    low_multiplier,
    projector_point,
    sobolev_norm,
)

log = logging.getLogger(__name__)

DEFAULT_SIGMA = -0.6  # the "-1/2-" weight, i.e. -1/2 - 0.1


@dataclass(frozen=True)
class DiscretePath:
    """Samples of a path in a Hilbert space; rows of ``vectors`` are the samples."""

    times: np.ndarray
    vectors: np.ndarray
    zero_prefix: bool = True
    metric: float = 1.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        v = np.asarray(self.vectors)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValidationError("path vectors must be a 2-D array (samples x dimension)")
        if v.shape[0] != t.size:
            raise ValidationError(f"{t.size} times but {v.shape[0]} samples")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("path times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValidationError("path samples must be finite")
        if not self.metric > 0:
            raise ValidationError("metric must be positive")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "vectors", v)

    @classmethod
    def from_fields(cls, grid, times, fields, zero_prefix=True):
        return cls(times, fields, zero_prefix, grid.spacing)

    @property
    def points(self):
        """Samples with the implicit zero prepended when flagged."""
        if self.zero_prefix:
            return np.vstack([np.zeros((1, self.vectors.shape[1]), dtype=self.vectors.dtype), self.vectors])
        return self.vectors

    @property
    def n_effective(self):
        return self.vectors.shape[0] + int(self.zero_prefix)

    def sup_norm(self):
        return float(np.sqrt(self.metric * np.max(np.sum(np.abs(self.vectors) ** 2, axis=1))))


def _check_q(q):
    if not q >= 1:
        raise ValidationError(f"q must be >= 1, got {q}")
    return float(q)


def distance_matrix(path):
    """D[j, k] = ||x_k - x_j|| over the effective points (upper triangle filled)."""
    X = path.points
    n = X.shape[0]
    D = np.zeros((n, n))
    for k in range(1, n):
        D[:k, k] = np.sqrt(path.metric * np.sum(np.abs(X[:k] - X[k]) ** 2, axis=1))
    return D


def q_variation(path, q, distances=None):
    """Exact sup over sub-partitions of the samples of (sum ||x_k - x_j||^q)^{1/q}.

    Dynamic program over right endpoints: best[k] = max_j (best[j] + D[j,k]^q),
    with best[k] = 0 allowed (a chain may start anywhere).
    """
    q = _check_q(q)
    if path.n_effective < 2:
        raise ValidationError("q-variation needs at least two effective samples")
    D = distance_matrix(path) if distances is None else distances
    Dq = D**q
    n = Dq.shape[0]
    best = np.zeros(n)
    for k in range(1, n):
        best[k] = max(0.0, float(np.max(best[:k] + Dq[:k, k])))
    return float(np.max(best) ** (1.0 / q))


def q_variation_bruteforce(path, q):
    """Enumerate every subset of >= 2 samples; the DP must match this exactly."""
    q = _check_q(q)
    D = distance_matrix(path)
    Dq = D**q
    n = Dq.shape[0]
    if n > 16:
        raise ValidationError("brute-force enumeration is limited to 16 effective samples")
    best = 0.0
    for size in range(2, n + 1):
        for idx in itertools.combinations(range(n), size):
            s = 0.0
            for a, b in zip(idx[:-1], idx[1:]):
                s = s + Dq[a, b]
            best = max(best, s)
    return float(best ** (1.0 / q))


# ---------------------------------------------------------------------------
# adapted norms


def _pulled_back(ctx, path, generator, s):
    """Spectral coefficients of <sqrt G>^s e^{+it G} v(t), plus the coefficient metric."""
    V = path.vectors
    if V.shape[1] != ctx.grid.n_points:
        raise ValidationError("adapted norms need a path of grid fields")
    t = path.times[:, None]
    g = ctx.grid
    if generator == "H":
        lam = ctx.eigenvalues
        c = ctx.coefficients(V.T).T
        metric = g.spacing
    elif generator == "H0":
        lam = g.k**2
        c = np.fft.fft(V, axis=1)
        metric = g.spacing / g.n_points
    else:
        raise ValidationError(f"unknown generator {generator!r}")
    c = c * np.exp(1j * t * lam)
    if s:
        c = c * (1.0 + np.maximum(lam, 0.0)) ** (s / 2)
    return c, lam, metric


def adapted_norm(ctx, path, q=2.0, generator="H", s=0.0):
    """||v||_{V^q_G(H^s)} = grid q-variation of <sqrt G>^s e^{itG} v(t)."""
    _check_q(q)
    c, _, metric = _pulled_back(ctx, path, generator, s)
    return q_variation(DiscretePath(path.times, c, path.zero_prefix, metric), q)


def x_norm(ctx, path, d=None, s=None, generator="H", include_low=True, return_blocks=False):
    """(sum_N N^{2s} ||Delta_N v||^2_{V^2_G})^{1/2} with s = (d-2)/2 by default.

    Blocks are the dyadic blocks resolvable on the grid, plus the low block
    (weight 1) when ``include_low``.  V^2 replaces U^2; since U^2 embeds in V^2
    this is a lower bound for the U^2-based norm.
    """
    d = ctx.d if d is None else d
    s = (d - 2) / 2 if s is None else s
    c, lam, metric = _pulled_back(ctx, path, generator, 0.0)
    blocks = {}
    total = 0.0
    labels = (["low"] if include_low else []) + dyadic_range(ctx)
    for N in labels:
        if N == "low":
            mult, weight = low_multiplier(lam), 1.0
        else:
            mult, weight = block_multiplier(N)(lam), float(N) ** (2 * s)
        if not np.any(mult):
            continue
        val = q_variation(DiscretePath(path.times, c * mult, path.zero_prefix, metric), 2.0)
        blocks[N] = val
        total += weight * val**2
    out = float(np.sqrt(total))
    return (out, blocks) if return_blocks else out


# ---------------------------------------------------------------------------
# duality pairing for step paths


def duality_pairing(u, v):
    """B(u, v) = sum_k <u(t_k) - u(t_{k-1}), v(t_k)> with u(t_{-1}) = 0.

    ``u`` is a right-continuous step path whose samples are the values after
    each jump; ``v`` is sampled at the same jump times.
    """
    U, Vv = _step_pair(u, v)
    jumps = np.diff(U, axis=0)
    return complex(u.metric * np.sum(jumps * np.conj(Vv)))


def _step_pair(u, v):
    if not isinstance(u, DiscretePath):
        raise ValidationError("u must be a DiscretePath")
    if not u.zero_prefix and np.any(u.vectors[0] != 0):
        raise ValidationError("u is not a step path starting from zero")
    Vv = v.vectors if isinstance(v, DiscretePath) else np.asarray(v)
    if Vv.ndim == 1:
        Vv = Vv[:, None]
    if isinstance(v, DiscretePath) and not np.array_equal(v.times, u.times):
        raise ValidationError("v must be sampled at the jump times of u")
    if Vv.shape != u.vectors.shape:
        raise ValidationError(f"v has shape {Vv.shape}, u has {u.vectors.shape}")
    U = np.vstack([np.zeros((1, u.vectors.shape[1]), dtype=complex), u.vectors])
    return U, Vv


def jump_norm_bound(u):
    """sum_k ||u(t_k) - u(t_{k-1})||, which bounds |B(u, v)| / sup_t ||v(t)||."""
    U, _ = _step_pair(u, u.vectors)
    return float(np.sum(np.sqrt(u.metric * np.sum(np.abs(np.diff(U, axis=0)) ** 2, axis=1))))


def _batch_v2(P, metric):
    """Grid V^2 norms of a batch of point sequences P[b, k, :] (same DP, vectorized over b)."""
    diff = P[:, :, None, :] - P[:, None, :, :]
    Dq = metric * np.sum(np.abs(diff) ** 2, axis=3)
    n = P.shape[1]
    best = np.zeros(P.shape[:2])
    for k in range(1, n):
        best[:, k] = np.max(best[:, :k] + Dq[:, :k, k], axis=1)
    return np.sqrt(np.max(best, axis=1))


def duality_lower_bound(u, n_samples=100_000, seed=0, chunk=4096):
    """Random-search sup of |B(u, v)| over paths with ||v||_{V^2} = 1 (a certified lower bound)."""
    U, _ = _step_pair(u, u.vectors)
    jumps = np.diff(U, axis=0)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xD0A1], dtype=np.uint64)))
    K, m = u.vectors.shape
    best, best_v = 0.0, None
    done = 0
    while done < n_samples:
        cnt = min(chunk, n_samples - done)
        v = rng.standard_normal((cnt, K, m)) + 1j * rng.standard_normal((cnt, K, m))
        P = np.concatenate([np.zeros((cnt, 1, m), dtype=complex), v], axis=1)
        nrm = _batch_v2(P, u.metric)
        vals = np.abs(u.metric * np.sum(jumps[None] * np.conj(v), axis=(1, 2))) / np.where(nrm > 0, nrm, np.inf)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best = float(vals[i])
            best_v = DiscretePath(u.times, v[i] / nrm[i], True, u.metric)
        done += cnt
    return best, best_v


def duality_supremum(u):
    """sup of Re B(u, v) over the (convex) unit ball of grid V^2, by constrained optimization.

    Each sub-partition gives a convex quadratic constraint sum ||Delta v||^2 <= 1,
    so the ball is their intersection and the maximum of the linear functional
    is a smooth convex program.  Rotating v by a phase turns Re B into |B|.
    """
    U, _ = _step_pair(u, u.vectors)
    jumps = np.diff(U, axis=0)
    K, m = u.vectors.shape
    n = K + 1
    chains = [idx for size in range(2, n + 1) for idx in itertools.combinations(range(n), size)]

    def unpack(x):
        return (x[: K * m] + 1j * x[K * m:]).reshape(K, m)

    def objective(x):
        return -u.metric * float(np.real(np.sum(jumps * np.conj(unpack(x)))))

    def grad(x):
        gc = -u.metric * jumps.ravel()
        return np.concatenate([gc.real, gc.imag])

    def constraint(x):
        P = np.vstack([np.zeros((1, m), dtype=complex), unpack(x)])
        sq = u.metric * np.sum(np.abs(P[:, None, :] - P[None, :, :]) ** 2, axis=2)
        return np.array([1.0 - sum(sq[a, b] for a, b in zip(c[:-1], c[1:])) for c in chains])

    x0 = np.concatenate([jumps.ravel().real, jumps.ravel().imag])
    start = DiscretePath(u.times, unpack(x0), True, u.metric)
    if q_variation(start, 2.0) > 0:
        x0 = x0 / q_variation(start, 2.0)
    res = scipy.optimize.minimize(objective, x0, jac=grad, method="SLSQP",
                                  constraints=[{"type": "ineq", "fun": constraint}],
                                  options={"ftol": 1e-12, "maxiter": 500})
    return float(-res.fun), DiscretePath(u.times, unpack(res.x), True, u.metric)


# ---------------------------------------------------------------------------
# weighted space-time norms


def _rows_and_times(trajectory):
    if isinstance(trajectory, Trajectory):
        return np.asarray(trajectory.times, dtype=float), np.asarray(trajectory.fields)
    if isinstance(trajectory, DiscretePath):
        return trajectory.times, trajectory.vectors
    times, rows = trajectory
    return np.asarray(times, dtype=float), np.asarray(rows)


def weighted_sobolev_sq(ctx, rows, s=1.0, sigma=DEFAULT_SIGMA):
    """||<D>^s (<x>^sigma u)||^2 per row, flat <D>."""
    g = ctx.grid
    power = np.fft.fft(rows * japanese(g.x) ** sigma, axis=1)
    return g.spacing / g.n_points * np.sum((1.0 + g.k**2) ** s * np.abs(power) ** 2, axis=1)


def weighted_spacetime_norm(ctx, trajectory, s=1.0, sigma=DEFAULT_SIGMA, project=True):
    """Trapezoid-in-time L^2 norm of ||<x>^sigma P_c u(t)||_{H^s}.

    ``trajectory`` is a Trajectory, a DiscretePath of fields or a (times, rows) pair.
    """
    times, rows = _rows_and_times(trajectory)
    if rows.size == 0:
        return 0.0
    if project:
        rows = rows - projector_point(ctx, rows.T).T
    vals = weighted_sobolev_sq(ctx, rows, s, sigma)
    return float(np.sqrt(np.sum(trapezoid_weights(times) * vals)))


@dataclass
class CoherenceReport:
    """adapted V^2_H(H^{1/2}) norm plus weighted L^2_t H^{1,sigma} norm of a free solution."""

    adapted: float
    weighted: float
    data_norm: float
    constant: float
    sigma: float
    horizon: float
    notes: list = field(default_factory=list)


def critical_weighted_constant(ctx, u0, horizon, dt=0.05, sigma=DEFAULT_SIGMA):
    """C = (||u||_{V^2_H(H^{1/2})} + ||u||_{L^2_t H^{1,sigma}}) / ||u0||_{H^{1/2}} for u = e^{-itH} P_c u0."""
    raw = np.asarray(u0, dtype=complex)
    u0 = raw - projector_point(ctx, raw)
    if ctx.grid.norm(u0) <= 1e-12 * ctx.grid.norm(raw):
        raise ValidationError("zero continuous-spectrum data in coherence check")
    times = np.linspace(0.0, horizon, int(round(horizon / dt)) + 1)
    rows = linear_path(ctx, u0, times)
    path = DiscretePath.from_fields(ctx.grid, times, rows)
    a = adapted_norm(ctx, path, 2.0, "H", 0.5)
    w = weighted_spacetime_norm(ctx, (times, rows), 1.0, sigma)
    dn = sobolev_norm(ctx, u0, 0.5, "distorted")
    if dn == 0:
        raise ValidationError("zero data in coherence check")
    return CoherenceReport(a, w, dn, (a + w) / dn, sigma, horizon,
                           ["grid V^q over sample times; U^2 not computed"])


def norm_entry(norm_id, value, **params):
    """JSON-ready record keyed by norm id and parameters."""
    label = "grid V^q" if norm_id in ("q_variation", "adapted", "x_norm") else norm_id
    return {"norm": norm_id, "label": label, "params": params, "value": float(value)}
