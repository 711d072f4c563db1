"""Deterministic flow between jumps on a truncated Dirichlet sine basis.

Fields on (0, 1) are stored as coefficient vectors in the orthonormal basis
f_k(x) = sqrt(2) sin(k pi x).  The Laplacian is diagonal there, so the linear
part of the mild solution is applied exactly and only the reaction term is
integrated numerically (integrating-factor Runge-Kutta).

Most routines work on batches: coefficient arrays of shape (B, K), discrete
states of shape (B, ...) and one control value per row.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad

PI = np.pi
SQRT2 = np.sqrt(2.0)
RULE_TOL = 1e-12


class FlowBlowupError(ArithmeticError):
    """Raised when the integrated coefficients stop being finite."""

    def __init__(self, time):
        self.time = float(time)
        super().__init__(f"non-finite coefficients at t = {self.time:.9g}")


# ---------------------------------------------------------------- fields

def mode_rates(K, diffusivity=1.0):
    """Decay rates diffusivity * (k pi)^2 for k = 1..K."""
    k = np.arange(1, K + 1, dtype=float)
    return diffusivity * (k * PI) ** 2


def sine_basis(x, K):
    """Matrix of basis values f_k(x_j), shape (len(x), K)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = np.arange(1, K + 1, dtype=float)
    return SQRT2 * np.sin(PI * np.outer(x, k))


def _as_coeffs(v):
    return np.asarray(getattr(v, "coeffs", v), dtype=float)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Truncated sine series v(x) = sum_k coeffs[k] sqrt(2) sin(k pi x)."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if c.size == 0:
            raise ValueError("a spectral field needs at least one mode")
        if not np.all(np.isfinite(c)):
            raise ValueError("spectral coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def K(self):
        return self.coeffs.size

    @classmethod
    def zeros(cls, K):
        return cls(np.zeros(K))

    @classmethod
    def mode(cls, k, K, amplitude=1.0):
        """amplitude * f_k represented with K modes."""
        if not 1 <= k <= K:
            raise ValueError(f"mode {k} outside 1..{K}")
        c = np.zeros(K)
        c[k - 1] = amplitude
        return cls(c)

    @classmethod
    def from_function(cls, func, K):
        """Project a function on [0, 1] onto the first K sine modes."""
        c = [quad(lambda x: func(x) * SQRT2 * np.sin(k * PI * x), 0.0, 1.0,
                  limit=200)[0] for k in range(1, K + 1)]
        return cls(np.array(c))

    def h_norm(self):
        return float(np.sqrt(np.dot(self.coeffs, self.coeffs)))

    def v_norm(self):
        w = 1.0 + mode_rates(self.K)
        return float(np.sqrt(np.dot(w * self.coeffs, self.coeffs)))

    def norm(self, kind="H"):
        if kind == "H":
            return self.h_norm()
        if kind == "V":
            return self.v_norm()
        raise ValueError(f"unknown norm {kind!r}")

    def __call__(self, x):
        """Point values on a spatial grid."""
        return sine_basis(x, self.K) @ self.coeffs

    def __add__(self, other):
        return SpectralField(self.coeffs + _as_coeffs(other))

    def __sub__(self, other):
        return SpectralField(self.coeffs - _as_coeffs(other))

    def __mul__(self, scalar):
        return SpectralField(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"SpectralField(K={self.K}, coeffs={np.array2string(self.coeffs, precision=5)})"


def norms(c, kind="H"):
    """Row-wise H or V norms of a coefficient array (..., K)."""
    c = np.asarray(c, dtype=float)
    if kind == "H":
        return np.sqrt(np.sum(c * c, axis=-1))
    if kind == "V":
        w = 1.0 + mode_rates(c.shape[-1])
        return np.sqrt(np.sum(w * c * c, axis=-1))
    raise ValueError(f"unknown norm {kind!r}")


def semigroup_apply(v, t, diffusivity=1.0):
    """Heat semigroup S(t) with Dirichlet conditions, applied mode by mode."""
    if t < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {t}")
    c = _as_coeffs(v)
    return SpectralField(c * np.exp(-mode_rates(c.size, diffusivity) * t))


# ------------------------------------------------------------ mollifiers

@lru_cache(maxsize=None)
def bump_normalization():
    """C such that C exp(1/(x^2-1)) integrates to one on (-1, 1)."""
    val, _ = quad(lambda x: np.exp(1.0 / (x * x - 1.0)), -1.0, 1.0,
                  epsabs=1e-15, epsrel=1e-13, limit=200)
    return 1.0 / val


def bump(x):
    """Normalized smooth bump supported on (-1, 1)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    xi = x[inside]
    out[inside] = bump_normalization() * np.exp(1.0 / (xi * xi - 1.0))
    return out


def _site_index(z, N):
    if not (0.0 < z < 1.0):
        raise ValueError(f"mollifier center must lie in (0, 1), got {z}")
    if int(N) != N or N < 1:
        raise ValueError(f"resolution N must be a positive integer, got {N}")
    i = int(round(z * N))
    if not (1 <= i <= N - 1) or abs(z - i / N) > 1e-12:
        raise ValueError(f"center {z} is not a site i/N of the grid with N = {N}")
    return i


@lru_cache(maxsize=None)
def _mollifier_coeffs(i, N, K):
    z = i / N
    half = 0.5 / N
    scale = 2.0 * N
    C = bump_normalization()

    def density(x):
        y = scale * (x - z)
        if abs(y) >= 1.0:
            return 0.0
        return scale * C * np.exp(1.0 / (y * y - 1.0))

    coeffs = np.empty(K)
    for k in range(1, K + 1):
        coeffs[k - 1] = quad(lambda x: density(x) * SQRT2 * np.sin(k * PI * x),
                             z - half, z + half, epsabs=1e-13, epsrel=1e-12,
                             limit=200)[0]
    coeffs.setflags(write=False)
    return coeffs


@dataclass(frozen=True, eq=False)
class Mollifier:
    """Smoothed Dirac mass xi(x) = phi_N(x - z) centred at a site z = i/N."""

    center: float
    N: int
    K: int
    normalization: float
    sine_coeffs: np.ndarray = field(repr=False)

    @property
    def support(self):
        half = 0.5 / self.N
        return (self.center - half, self.center + half)

    def density(self, x):
        return 2.0 * self.N * bump(2.0 * self.N * (np.asarray(x, dtype=float) - self.center))

    def mass(self):
        a, b = self.support
        return quad(lambda x: float(self.density(x)), a, b, epsabs=1e-13,
                    epsrel=1e-12, limit=200)[0]

    def field(self):
        return SpectralField(self.sine_coeffs)


def mollifier_build(z, N, K):
    """Mollified Dirac mass at the site z = i/N, with K cached sine coefficients."""
    i = _site_index(z, N)
    return Mollifier(center=i / N, N=int(N), K=int(K),
                     normalization=bump_normalization(),
                     sine_coeffs=_mollifier_coeffs(i, int(N), int(K)))


@lru_cache(maxsize=None)
def mollifier_matrix(N, K):
    """Rows are the sine coefficients of the mollifiers at sites 1/N .. (N-1)/N."""
    M = np.array([_mollifier_coeffs(i, N, K) for i in range(1, N)]).reshape(N - 1, K)
    M.setflags(write=False)
    return M


def field_pairing(v, m):
    """L^2 pairing (xi, v) computed from sine coefficients."""
    c = _as_coeffs(v)
    if c.shape[-1] != m.K:
        raise ValueError(f"field has {c.shape[-1]} modes, mollifier has {m.K}")
    return float(np.dot(c, m.sine_coeffs))


# --------------------------------------------------------------- reaction

@dataclass(frozen=True)
class ReactionTerm:
    """Reaction part f_d(v, u) of the flow.

    ``evaluate(c, d, u)`` works on batches: c of shape (B, K), d of shape
    (B, ...), u of shape (B,), returning (B, K).  ``affine_in_control``
    lets relaxed controls be evaluated at their barycenter.
    """

    evaluate: Callable
    lipschitz: float
    b1: float
    b2: float
    affine_in_control: bool = False

    def __call__(self, v, d, u):
        c = _as_coeffs(v)
        out = self.evaluate(c[None, :], np.asarray(d)[None, ...],
                            np.array([float(u)]))[0]
        if out.shape != c.shape:
            raise ValueError("reaction output has the wrong number of modes")
        return SpectralField(out)

    def growth_ok(self, samples):
        """Check ||f_d(v,u)|| <= b1 + b2 ||v|| on (v, d, u) samples."""
        for v, d, u in samples:
            f = self(v, d, u)
            if f.h_norm() > self.b1 + self.b2 * SpectralField(_as_coeffs(v)).h_norm() + 1e-12:
                return False
        return True


ZERO_REACTION = ReactionTerm(lambda c, d, u: np.zeros_like(c), 0.0, 0.0, 1.0, True)


# ---------------------------------------------------------- control rules

@dataclass(frozen=True, eq=False)
class RelaxedRule:
    """Piecewise-constant relaxed control on [0, horizon].

    Segment s covers [breaks[s], breaks[s+1]) and carries probability
    weights over the control grid ``atoms``.  An ordinary rule has a single
    unit atom per segment.
    """

    breaks: np.ndarray
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        b = np.array(self.breaks, dtype=float).reshape(-1)
        a = np.array(self.atoms, dtype=float).reshape(-1)
        w = np.array(self.weights, dtype=float)
        if w.ndim == 1:
            w = w[None, :]
        if b.size < 2 or b[0] != 0.0:
            raise ValueError("segment boundaries must start at 0")
        if np.any(np.diff(b) < 0) or (b[-1] > 0 and np.any(np.diff(b) <= 0)):
            raise ValueError("segment boundaries must be increasing")
        if w.shape != (b.size - 1, a.size):
            raise ValueError(f"weights shape {w.shape} does not match "
                             f"{b.size - 1} segments x {a.size} atoms")
        if np.any(w < -RULE_TOL) or np.any(np.abs(w.sum(axis=1) - 1.0) > RULE_TOL):
            raise ValueError("segment weights must be nonnegative and sum to 1")
        w = np.clip(w, 0.0, None)
        for arr in (b, a, w):
            arr.setflags(write=False)
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    @classmethod
    def constant(cls, u, horizon):
        return cls([0.0, horizon], [u], [[1.0]])

    @classmethod
    def ordinary(cls, breaks, values):
        """One unit atom per segment at the given control values."""
        values = np.asarray(values, dtype=float)
        atoms, idx = np.unique(values, return_inverse=True)
        w = np.zeros((values.size, atoms.size))
        w[np.arange(values.size), idx] = 1.0
        return cls(breaks, atoms, w)

    @classmethod
    def mixture(cls, atoms, weights, horizon):
        return cls([0.0, horizon], atoms, [weights])

    @property
    def horizon(self):
        return float(self.breaks[-1])

    @property
    def n_segments(self):
        return self.weights.shape[0]

    def segment_index(self, t):
        s = np.searchsorted(self.breaks, t, side="right") - 1
        return np.clip(s, 0, self.n_segments - 1)

    def barycenters(self):
        return self.weights @ self.atoms

    def control_at(self, t):
        """Barycenter of the relaxed control at time t."""
        return self.barycenters()[self.segment_index(t)]

    def integrated_barycenter(self, t):
        """int_0^t of the barycenter, for t within the horizon."""
        t = float(t)
        lengths = np.clip(np.minimum(self.breaks[1:], t) - self.breaks[:-1], 0.0, None)
        return float(lengths @ self.barycenters())

    def is_ordinary(self):
        return bool(np.all(np.isclose(self.weights.max(axis=1), 1.0, atol=RULE_TOL, rtol=0)))

    def scaled(self, horizon):
        """Same rule with segment boundaries stretched to a new horizon."""
        if self.horizon == 0.0:
            raise ValueError("cannot rescale a rule of zero length")
        return RelaxedRule(self.breaks * (horizon / self.horizon), self.atoms, self.weights)

    def shifted(self, s):
        """Rule restricted to [s, horizon] and re-based to start at 0."""
        if not 0.0 <= s <= self.horizon:
            raise ValueError("shift outside the rule horizon")
        keep = self.breaks[1:-1] > s + 1e-14
        first = self.segment_index(s)
        inner = self.breaks[1:-1][keep] - s
        b = np.concatenate([[0.0], inner, [self.horizon - s]])
        w = self.weights[first:][: b.size - 1]
        return RelaxedRule(b, self.atoms, w)

    def encoding(self):
        """Hashable, orderable description used for ties and exports."""
        return (tuple(np.round(self.breaks / max(self.horizon, 1e-300), 12)),
                tuple(self.atoms), tuple(tuple(row) for row in self.weights))

    def to_dict(self):
        return {"breaks": self.breaks.tolist(), "atoms": self.atoms.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["breaks"], data["atoms"], data["weights"])


# ------------------------------------------------------------- stepping

def relaxed_reaction(reaction, c, d, U, W):
    """Weighted reaction sum_a W[:, a] f_d(c, U[:, a]) for each row."""
    if reaction.affine_in_control:
        return reaction.evaluate(c, d, np.sum(U * W, axis=1))
    out = np.zeros_like(c)
    for a in range(U.shape[1]):
        wa = W[:, a]
        if np.any(wa > 0):
            out += wa[:, None] * reaction.evaluate(c, d, U[:, a])
    return out


def relaxed_rate(rate, c, d, U, W):
    """Weighted jump rate sum_a W[:, a] lambda_d(c, U[:, a]) for each row."""
    out = np.zeros(c.shape[0])
    for a in range(U.shape[1]):
        wa = W[:, a]
        if np.any(wa > 0):
            out += wa * rate(c, d, U[:, a])
    return out


def _segment_field(reaction, d, U, W):
    """Reaction with the relaxed control of one segment frozen: c -> f(c)."""
    if reaction.affine_in_control:
        ubar = np.sum(U * W, axis=1)
        return lambda c: reaction.evaluate(c, d, ubar)
    return lambda c: relaxed_reaction(reaction, c, d, U, W)


def _lawson(field_fn, c, hc, full, half, scheme):
    k1 = field_fn(c)
    if scheme == "euler":
        return full * (c + hc * k1)
    k2 = field_fn(half * (c + 0.5 * hc * k1))
    k3 = field_fn(half * c + 0.5 * hc * k2)
    k4 = field_fn(full * c + hc * half * k3)
    return full * c + hc / 6.0 * (full * k1 + 2.0 * half * (k2 + k3) + k4)


def lawson_step(reaction, c, d, U, W, h, rates, scheme="rk4"):
    """Advance rows of c by steps h with the control frozen over the step.

    The linear part is exact through the factor exp(-rates h).  ``rk4`` is
    the classical fourth-order integrating-factor scheme; ``euler`` is the
    first-order exponential Euler update e^{-Lh}(c + h f(c)).
    """
    if scheme not in ("rk4", "euler"):
        raise ValueError(f"unknown scheme {scheme!r}")
    h = np.asarray(h, dtype=float)
    hc = h[:, None] if h.ndim else h
    full = np.exp(-rates * hc)
    half = np.exp(-rates * (0.5 * hc))
    return _lawson(_segment_field(reaction, d, U, W), c, hc, full, half, scheme)


def time_grid(horizon, dt, breaks=()):
    """Multiples of dt on [0, horizon] merged with the segment boundaries."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = int(np.floor(horizon / dt + 1e-9))
    pts = np.concatenate([dt * np.arange(n + 1), np.asarray(breaks, float), [horizon]])
    pts = np.unique(pts[(pts >= 0) & (pts <= horizon)])
    tol = 1e-10 * max(dt, 1e-300)
    keep = np.concatenate([[True], np.diff(pts) > tol])
    pts = pts[keep]
    if horizon == 0:
        return pts[:1]
    if pts.size == 1:
        return np.array([0.0, horizon])
    # both endpoints survive; interior points too close to the end are merged
    pts[-1] = horizon
    while pts.size > 2 and pts[-1] - pts[-2] <= tol:
        pts = np.delete(pts, -2)
    return pts


@dataclass(frozen=True, eq=False)
class FlowTrajectory:
    """Samples of the flow; coeffs has shape (M+1, K) or (M+1, B, K)."""

    times: np.ndarray
    coeffs: np.ndarray
    hazard: Optional[np.ndarray] = None

    def field(self, i):
        return SpectralField(self.coeffs[i])

    def final(self):
        return SpectralField(self.coeffs[-1])

    def csv_rows(self):
        header = ["t"] + [f"coeff_{k}" for k in range(1, self.coeffs.shape[-1] + 1)]
        return header, np.column_stack([self.times, self.coeffs])


def integrate_batch(reaction, c0, d, atoms, weights, breaks, horizon, dt,
                    rate=None, diffusivity=1.0, scheme="rk4"):
    """Integrate B flows sharing segment boundaries and a time grid.

    atoms: (A,) or (B, A); weights: (B, n_seg, A); breaks: (n_seg+1,).
    Returns times (M+1,), coefficients (M+1, B, K), hazard (M+1, B) or None.
    The hazard uses the trapezoid rule with the control of each step.
    """
    c = np.array(c0, dtype=float)
    B, K = c.shape
    d = np.asarray(d)
    weights = np.asarray(weights, dtype=float)
    U = np.broadcast_to(np.asarray(atoms, dtype=float), (B, weights.shape[2]))
    breaks = np.asarray(breaks, dtype=float)
    times = time_grid(horizon, dt, breaks[1:-1])
    rates = mode_rates(K, diffusivity)
    out = np.empty((times.size, B, K))
    out[0] = c
    haz = None
    if rate is not None:
        haz = np.zeros((times.size, B))
    if scheme not in ("rk4", "euler"):
        raise ValueError(f"unknown scheme {scheme!r}")
    mids = 0.5 * (times[1:] + times[:-1])
    segs = np.clip(np.searchsorted(breaks, mids, side="right") - 1, 0, weights.shape[1] - 1)
    steps = np.diff(times)
    factors = {}
    seg_prev = -1
    lam_start = None
    for j in range(times.size - 1):
        h = steps[j]
        seg = segs[j]
        if seg != seg_prev:
            W = weights[:, seg, :]
            field_fn = _segment_field(reaction, d, U, W)
            if rate is not None:
                lam_start = relaxed_rate(rate, c, d, U, W)
        fac = factors.get(h)
        if fac is None:
            fac = factors[h] = (np.exp(-rates * h), np.exp(-rates * (0.5 * h)))
        c = _lawson(field_fn, c, h, fac[0], fac[1], scheme)
        if not np.isfinite(c).all():
            raise FlowBlowupError(times[j + 1])
        out[j + 1] = c
        if rate is not None:
            lam_end = relaxed_rate(rate, c, d, U, W)
            haz[j + 1] = haz[j] + 0.5 * h * (lam_start + lam_end)
            lam_start = lam_end
        seg_prev = seg
    return times, out, haz


def flow_integrate(v0, d, rule, horizon, dt, reaction, rate=None,
                   diffusivity=1.0, scheme="rk4"):
    """Flow phi_t(v0, d) under a control rule, sampled at multiples of dt.

    Segment boundaries of the rule are added to the sample grid so that the
    control is constant over every step.  When ``rate`` is given, the
    cumulative hazard int_0^t lambda_d(phi_s, a(s)) ds is returned as well.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if rule.horizon + 1e-9 < horizon:
        raise ValueError("control rule does not cover the horizon")
    c0 = _as_coeffs(v0)[None, :]
    times, out, haz = integrate_batch(
        reaction, c0, np.asarray(d)[None, ...], rule.atoms, rule.weights[None],
        rule.breaks, horizon, dt, rate, diffusivity, scheme)
    return FlowTrajectory(times, out[:, 0, :], None if haz is None else haz[:, 0])


def flow_exact_elementary(v0, d, rule, t):
    """Closed-form flow of dv/dt = Laplacian v + (d + u) v."""
    if d not in (-1, 1):
        raise ValueError("discrete state must be -1 or 1")
    if t < 0 or t > rule.horizon + 1e-12:
        raise ValueError("time outside the rule horizon")
    c = _as_coeffs(v0)
    expo = -mode_rates(c.size) * t + d * t + rule.integrated_barycenter(t)
    return SpectralField(c * np.exp(expo))
