"""Embedded Markov decision process of post-jump locations.

Stage costs c'(z, rule) and kernel expectations Q'w(z, rule) are computed
along the jump-free controlled flow with the survival weight
chi_t = exp(-int lambda).  Value iteration runs on a grid over a reduced
state (at most three sine coefficients) x discrete state x jump time, with
multilinear interpolation, and is monitored in the weighted sup norm
induced by a bounding function.
"""

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .flow import RelaxedRule, integrate_batch, norms
from .pdmp import (CEMETERY, UpsilonPoint, Strategy, run_ensemble, trajectory_rngs)

MARGIN_C = 0.9
TAIL_EPS = 1e-8


class ContractionViolation(ArithmeticError):
    """Successive value-iteration differences stopped shrinking."""


# ------------------------------------------------------------------ costs

@dataclass(frozen=True, eq=False)
class Reference:
    """Reference potential, constant or sampled in time (linear interpolation)."""

    coeffs: np.ndarray
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        c = np.array(getattr(self.coeffs, "coeffs", self.coeffs), dtype=float)
        if self.times is None:
            c = c.reshape(-1)
        else:
            t = np.array(self.times, dtype=float).reshape(-1)
            if c.ndim != 2 or c.shape[0] != t.size:
                raise ValueError("time-sampled reference needs one coefficient row per time")
            if np.any(np.diff(t) <= 0):
                raise ValueError("reference times must be increasing")
            object.__setattr__(self, "times", t)
        if not np.all(np.isfinite(c)):
            raise ValueError("reference must be finite")
        object.__setattr__(self, "coeffs", c)

    @property
    def K(self):
        return self.coeffs.shape[-1]

    def at(self, t):
        """Reference coefficients at times t, shape (len(t), K)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.times is None:
            return np.broadcast_to(self.coeffs, (t.size, self.K))
        return np.stack([np.interp(t, self.times, self.coeffs[:, k]) for k in range(self.K)], axis=1)

    def sup_norm(self, kind="H"):
        return float(np.max(norms(np.atleast_2d(self.coeffs), kind)))

    @classmethod
    def from_csv(cls, path):
        """Rows ``t,coeff_1,...,coeff_K`` with a header line."""
        data = np.loadtxt(path, delimiter=",", comments="#", skiprows=1, ndmin=2)
        return cls(data[:, 1:], data[:, 0])


@dataclass(frozen=True, eq=False)
class QuadraticCostSpec:
    """Running cost a r^2 + b s^2 + c r s + d r + e s + f + kappa |v - V_ref(t)|^2
    and terminal cost h r^2 + i r + j + kappa_T |v - V_ref(T)|^2, where r is the
    H or V norm of v and s = |u|.
    """

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    e: float = 0.0
    f: float = 0.0
    h: float = 0.0
    i: float = 0.0
    j: float = 0.0
    kappa: float = 0.0
    kappa_T: float = 0.0
    norm: str = "H"
    reference: Optional[Reference] = None
    s_max: float = 1.0
    scan_radius: float = 100.0

    def __post_init__(self):
        if self.norm not in ("H", "V"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.kappa < 0 or self.kappa_T < 0:
            raise ValueError("tracking weights must be nonnegative")
        r = np.linspace(0.0, self.scan_radius, 401)[:, None]
        s = np.linspace(0.0, max(self.s_max, 0.0), 41)[None, :]
        run = self._poly_running(r, s)
        term = self._poly_terminal(r[:, 0])
        if run.min() < -1e-12 or term.min() < -1e-12 or self.a < 0 or self.b < 0 or self.h < 0:
            raise ValueError("cost is negative somewhere on the scanned domain")

    def _poly_running(self, r, s):
        return (self.a * r * r + self.b * s * s + self.c * r * s + self.d * r
                + self.e * s + self.f)

    def _poly_terminal(self, r):
        return self.h * r * r + self.i * r + self.j

    def _tracking(self, c, t, weight):
        if not weight:
            return 0.0
        ref = self.reference.at(t) if self.reference is not None else 0.0
        return weight * norms(c - ref, self.norm) ** 2

    def running_batch(self, c, u, t):
        r = norms(c, self.norm)
        return self._poly_running(r, np.abs(u)) + self._tracking(c, t, self.kappa)

    def terminal_batch(self, c, t):
        r = norms(c, self.norm)
        return self._poly_terminal(r) + self._tracking(c, t, self.kappa_T)

    def running_cost(self, v, u, t=0.0):
        c = np.asarray(getattr(v, "coeffs", v), dtype=float)[None, :]
        return float(self.running_batch(c, np.array([float(u)]), np.array([float(t)]))[0])

    def terminal_cost(self, v, t=0.0):
        c = np.asarray(getattr(v, "coeffs", v), dtype=float)[None, :]
        return float(self.terminal_batch(c, np.array([float(t)]))[0])

    @property
    def is_zero(self):
        return not any([self.a, self.b, self.c, self.d, self.e, self.f, self.h,
                        self.i, self.j, self.kappa, self.kappa_T])

    def ref_sup(self):
        return 0.0 if self.reference is None else self.reference.sup_norm(self.norm)

    def running_majorant(self, r, s):
        """Nondecreasing upper bound of the running cost in (|v|, |u|)."""
        R = self.ref_sup()
        return (abs(self.a) * r * r + abs(self.b) * s * s + abs(self.c) * r * s
                + abs(self.d) * r + abs(self.e) * s + abs(self.f)
                + self.kappa * (r + R) ** 2)

    def terminal_majorant(self, r):
        R = self.ref_sup()
        return abs(self.h) * r * r + abs(self.i) * r + abs(self.j) + self.kappa_T * (r + R) ** 2

    def to_dict(self):
        out = {k: getattr(self, k) for k in "abcdefhij"}
        out.update(kappa=self.kappa, kappa_T=self.kappa_T, norm=self.norm)
        return out


def tracking_cost(kappa, reference, control_weight=1.0, kappa_T=0.0, s_max=1.0):
    """kappa |v - V_ref|^2 + control_weight u^2 (the elementary-model cost)."""
    return QuadraticCostSpec(b=control_weight, kappa=kappa, kappa_T=kappa_T,
                             reference=reference, s_max=s_max)


# --------------------------------------------------------------- bounding

def contraction_constant(c_phi, m_lambda, delta, zeta):
    return c_phi * m_lambda / (zeta + delta)


@dataclass(frozen=True)
class BoundingSpec:
    """Bounding function b(|v|) and the weighted-norm contraction constants."""

    M2: float
    M3: float
    MS: float
    b1: float
    b2: float
    T: float
    s_max: float
    c_c: float
    c_g: float
    c_phi: float
    zeta: float
    delta: float
    m_lambda: float
    cost: QuadraticCostSpec = field(repr=False)

    @property
    def C(self):
        return contraction_constant(self.c_phi, self.m_lambda, self.delta, self.zeta)

    def b(self, r):
        r = np.maximum(np.asarray(r, dtype=float), self.M3)
        return self.cost.running_majorant(r, self.s_max) + self.cost.terminal_majorant(r) + 1.0

    def B_star(self, r, h):
        """Weight b(|nu|) exp(zeta (T - h)) of a post-jump point."""
        return self.b(r) * np.exp(self.zeta * (self.T - np.asarray(h, dtype=float)))

    def B_star_point(self, z):
        if z is CEMETERY:
            return 0.0
        return float(self.B_star(np.linalg.norm(z.nu), z.h))

    @property
    def tail_factor(self):
        return self.c_phi * (self.c_c / self.delta + self.c_g)

    def tail_bound(self, n, B0):
        return self.tail_factor * self.C ** n / (1.0 - self.C) * B0

    def n_max(self, B0, eps=TAIL_EPS):
        """Smallest n with tail_bound(n, B0) < eps."""
        lead = math.log(self.tail_factor * B0 / ((1.0 - self.C) * eps))
        return max(0, int(math.floor(lead / -math.log(self.C))) + 1)

    def to_dict(self):
        keys = ("M2", "M3", "MS", "b1", "b2", "T", "s_max", "c_c", "c_g", "c_phi",
                "zeta", "delta", "m_lambda")
        out = {k: getattr(self, k) for k in keys}
        out["C"] = self.C
        return out


def bounding_build(model, cost, M2, T, zeta=None):
    """Bounding function for the flow started in the ball |v|_H <= M2.

    M3 = (M2 + b1 T) M_S e^{M_S b2 T} bounds the flow from that ball; b is the
    cost majorant evaluated at max(|v|, M3), so c <= b and g <= b (c_c = c_g = 1)
    and b(phi_t v) <= (M3/M2)^2 b(v).  zeta defaults to the smallest value
    giving C <= 0.9.
    """
    if M2 <= 0:
        raise ValueError("M2 must be positive")
    if cost.norm != "H":
        raise ValueError("the bounding construction needs H-norm costs")
    reaction = model.reaction
    MS = 1.0
    M3 = (M2 + reaction.b1 * T) * MS * math.exp(MS * reaction.b2 * T)
    c_phi = (M3 / M2) ** 2
    if zeta is None:
        zeta = max(0.0, c_phi * model.m_lambda / MARGIN_C - model.delta)
    spec = BoundingSpec(M2, M3, MS, reaction.b1, reaction.b2, T,
                        max(abs(model.u_min), abs(model.u_max)), 1.0, 1.0, c_phi,
                        float(zeta), model.delta, model.m_lambda, cost)
    if spec.C >= 1.0:
        raise ValueError(f"contraction constant {spec.C} is not below 1")
    return spec


# ------------------------------------------------------------ value grids

@dataclass(frozen=True, eq=False)
class ValueGrid:
    """Tensor grid: discrete state x coefficient axes x jump time."""

    coeff_axes: tuple
    d_values: tuple
    h_axis: np.ndarray

    def __post_init__(self):
        axes = tuple(np.array(a, dtype=float) for a in self.coeff_axes)
        if not 1 <= len(axes) <= 3:
            raise ValueError("value grids use one to three coefficient axes")
        for a in axes + (np.asarray(self.h_axis, dtype=float),):
            if a.size < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("grid axes need at least two increasing nodes")
        object.__setattr__(self, "coeff_axes", axes)
        object.__setattr__(self, "h_axis", np.array(self.h_axis, dtype=float))
        object.__setattr__(self, "d_values", tuple(self.d_values))

    @classmethod
    def uniform(cls, n_axes, bound, n_coeff, d_values, T, n_h):
        ax = np.linspace(-bound, bound, n_coeff)
        return cls(tuple(ax for _ in range(n_axes)), d_values, np.linspace(0.0, T, n_h))

    @property
    def n_axes(self):
        return len(self.coeff_axes)

    @property
    def shape(self):
        return (len(self.d_values),) + tuple(a.size for a in self.coeff_axes) + (self.h_axis.size,)

    @property
    def n_nodes(self):
        return int(np.prod(self.shape))

    def nodes(self):
        """Coefficients (N, n_axes), discrete index (N,), jump time (N,) in C order."""
        idx = np.indices(self.shape).reshape(len(self.shape), -1)
        coeffs = np.stack([self.coeff_axes[k][idx[k + 1]] for k in range(self.n_axes)], axis=1)
        return coeffs, idx[0], self.h_axis[idx[-1]]

    def d_index(self, d):
        return self.d_values.index(d)

    def _bracket(self, axis, x):
        n = axis.size
        i = np.clip(np.searchsorted(axis, x, side="right") - 1, 0, n - 2)
        t = (x - axis[i]) / (axis[i + 1] - axis[i])
        span = axis[-1] - axis[0]
        out = (x < axis[0] - 1e-9 * span) | (x > axis[-1] + 1e-9 * span)
        return i, np.clip(t, 0.0, 1.0), out

    def interpolation(self, coeffs, d_idx, h):
        """Multilinear weights: node indices and weights (P, 2^(n_axes+1)), clamp mask."""
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        P = coeffs.shape[0]
        axes = list(self.coeff_axes) + [self.h_axis]
        vals = [coeffs[:, k] for k in range(self.n_axes)] + [np.asarray(h, dtype=float)]
        strides = np.cumprod((self.shape[1:] + (1,))[::-1])[::-1]
        base = np.asarray(d_idx, dtype=np.int64) * strides[0]
        brackets = [self._bracket(a, x) for a, x in zip(axes, vals)]
        clamped = np.zeros(P, dtype=bool)
        for _, _, o in brackets:
            clamped |= o
        n_c = 2 ** len(axes)
        cols = np.empty((P, n_c), dtype=np.int64)
        wts = np.empty((P, n_c))
        for corner, bits in enumerate(itertools.product((0, 1), repeat=len(axes))):
            col = base.copy()
            w = np.ones(P)
            for k, (bit, (i, t, _)) in enumerate(zip(bits, brackets)):
                col += (i + bit) * strides[k + 1]
                w *= t if bit else 1.0 - t
            cols[:, corner] = col
            wts[:, corner] = w
        return cols, wts, clamped

    def nearest(self, coeffs, d_idx, h):
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        axes = list(self.coeff_axes) + [self.h_axis]
        vals = [coeffs[:, k] for k in range(self.n_axes)] + [np.atleast_1d(np.asarray(h, float))]
        strides = np.cumprod((self.shape[1:] + (1,))[::-1])[::-1]
        out = np.asarray(d_idx, dtype=np.int64) * strides[0]
        for k, (a, x) in enumerate(zip(axes, vals)):
            out = out + np.abs(x[:, None] - a[None, :]).argmin(axis=1) * strides[k + 1]
        return out

    def to_dict(self):
        return {"coeff_axes": [a.tolist() for a in self.coeff_axes],
                "d_values": list(self.d_values), "h_axis": self.h_axis.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["coeff_axes"]), tuple(data["d_values"]), data["h_axis"])


@dataclass(frozen=True, eq=False)
class ValueTable:
    """Grid values with multilinear interpolation and weighted-norm bookkeeping."""

    grid: ValueGrid
    values: np.ndarray
    bounding: Optional[BoundingSpec] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.n_nodes:
            raise ValueError("value table size does not match the grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("value table entries must be finite")
        object.__setattr__(self, "values", v)

    def __call__(self, nu, d, h):
        c = np.asarray(getattr(nu, "coeffs", nu), dtype=float)[: self.grid.n_axes]
        cols, wts, _ = self.grid.interpolation(c[None, :], [self.grid.d_index(d)], [h])
        return float(wts[0] @ self.values[cols[0]])

    def node_weights(self):
        return node_weights(self.grid, self.bounding)

    def weighted_norm(self):
        return float(np.max(np.abs(self.values) / self.node_weights()))

    def to_dict(self):
        return {"grid": self.grid.to_dict(), "values": self.values.tolist()}


def node_weights(grid, bounding):
    coeffs, _, h = grid.nodes()
    return bounding.B_star(np.linalg.norm(coeffs, axis=1), h)


# ------------------------------------------------------------ rule family

@dataclass(frozen=True, eq=False)
class RuleTemplate:
    """Relaxed rule on [0, 1] with equal segments and lattice weights."""

    numerators: tuple
    atoms: tuple
    lattice: int

    @property
    def n_t(self):
        return len(self.numerators)

    @property
    def encoding(self):
        return (self.n_t, self.numerators)

    @property
    def unit_rule(self):
        w = np.array(self.numerators, dtype=float) / self.lattice
        return RelaxedRule(np.linspace(0.0, 1.0, self.n_t + 1), self.atoms, w)

    def rule(self, horizon):
        w = np.array(self.numerators, dtype=float) / self.lattice
        return RelaxedRule(np.linspace(0.0, 1.0, self.n_t + 1) * horizon, self.atoms, w)


def simplex_lattice(n_atoms, lattice):
    """Integer vectors of length n_atoms summing to lattice."""
    out = []
    for bars in itertools.combinations(range(lattice + n_atoms - 1), n_atoms - 1):
        prev, parts = -1, []
        for b in bars + (lattice + n_atoms - 1,):
            parts.append(b - prev - 1)
            prev = b
        out.append(tuple(parts))
    return sorted(out)


def rule_family(atoms, n_t_values=(1,), lattice=4):
    """All lattice rules over the control grid, sorted by encoding."""
    atoms = tuple(float(a) for a in atoms)
    if not atoms or len(atoms) > 5:
        raise ValueError("the control grid needs between 1 and 5 atoms")
    if not n_t_values or any(n not in (1, 2, 3) for n in n_t_values):
        raise ValueError("segment counts must be drawn from {1, 2, 3}")
    per_seg = simplex_lattice(len(atoms), lattice)
    family = [RuleTemplate(nums, atoms, lattice)
              for n_t in sorted(set(n_t_values))
              for nums in itertools.product(per_seg, repeat=n_t)]
    if not family:
        raise ValueError("empty rule family")
    return sorted(family, key=lambda r: r.encoding)


def barycenter_rule(rule, control_range=None, admissible=None):
    """Ordinary rule using the barycenter of each segment's weights.

    control_range: (lo, hi) of a convex control set; admissible: finite set of
    allowed values (non-convex U), in which case a barycenter outside it is
    an error.
    """
    bar = rule.barycenters()
    if control_range is not None:
        lo, hi = control_range
        if np.any(bar < lo - 1e-12) or np.any(bar > hi + 1e-12):
            raise ValueError("barycenter leaves the control interval")
    if admissible is not None:
        allowed = np.asarray(admissible, dtype=float)
        if not all(np.any(np.abs(allowed - u) <= 1e-12) for u in bar):
            raise ValueError("barycenter is not an admissible control value")
    if rule.horizon == 0.0:
        return RelaxedRule.constant(bar[0], 0.0)
    return RelaxedRule.ordinary(rule.breaks, bar)


# ------------------------------------------------- stage discretization

@dataclass
class StageTerms:
    """Per-row stage cost and the jump targets of the discretized kernel."""

    cprime: np.ndarray
    rows: np.ndarray
    coeffs: np.ndarray
    d_idx: np.ndarray
    h: np.ndarray
    weight: np.ndarray


def stage_terms(model, cost, points, rules, T, dt, with_kernel=True):
    """Stage costs c'(z, rule) and kernel targets for many (z, rule) rows.

    On each flow step the survival mass chi_j - chi_{j+1} is split evenly
    between its two endpoints, each carrying the post-jump law of that
    step's control; the kernel mass is then exactly 1 - chi at the horizon.
    Rows sharing segment boundaries are integrated together.
    """
    n = len(points)
    cprime = np.zeros(n)
    parts = []
    groups = {}
    for r, (z, rule) in enumerate(zip(points, rules)):
        horizon = T - z.h
        if abs(rule.horizon - horizon) > 1e-9 * max(1.0, T):
            rule = _fit_rule(rule, horizon)
        groups.setdefault(tuple(np.round(rule.breaks, 13)), []).append((r, rule))
    for key, members in groups.items():
        idx = np.array([m[0] for m in members])
        rl = [m[1] for m in members]
        breaks = rl[0].breaks
        n_seg = rl[0].n_segments
        A = max(x.atoms.size for x in rl)
        atoms = np.zeros((idx.size, A))
        weights = np.zeros((idx.size, n_seg, A))
        for k, x in enumerate(rl):
            atoms[k, :x.atoms.size] = x.atoms
            weights[k, :, :x.atoms.size] = x.weights
        c0 = np.array([points[r].nu for r in idx])
        d0 = np.array([points[r].d for r in idx])
        h0 = np.array([points[r].h for r in idx])
        times, out, _ = integrate_batch(model.reaction, c0, d0, atoms, weights, breaks,
                                        breaks[-1], dt, None, model.diffusivity)
        res = _group_terms(model, cost, times, out, d0, h0, atoms, weights, breaks, with_kernel)
        cprime[idx] = res[0]
        if with_kernel and res[1] is not None:
            rows_local, pts, dd, hh, ww = res[1]
            parts.append((idx[rows_local], pts, dd, hh, ww))
    if with_kernel and parts:
        cat = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    else:
        K = points[0].nu.size if n else 0
        cat = [np.zeros(0, int), np.zeros((0, K)), np.zeros(0, int), np.zeros(0), np.zeros(0)]
    return StageTerms(cprime, *cat)


def _fit_rule(rule, horizon):
    if rule.horizon <= 0.0:
        return RelaxedRule.constant(rule.barycenters()[-1], horizon)
    if rule.horizon < horizon:
        raise ValueError("control rule does not cover the remaining horizon")
    b = rule.breaks[rule.breaks < horizon]
    w = rule.weights[: b.size]
    return RelaxedRule(np.append(b, horizon), rule.atoms, w)


def _group_terms(model, cost, times, out, d0, h0, atoms, weights, breaks, with_kernel):
    M = times.size - 1
    B, A = atoms.shape
    K = out.shape[2]
    flat = out.reshape(-1, K)
    d_rep = np.tile(d0, times.size)
    t_abs = (times[:, None] + h0[None, :]).reshape(-1)
    lam = np.empty((A, times.size, B))
    run = np.empty((A, times.size, B))
    for a in range(A):
        u = np.repeat(atoms[None, :, a], times.size, axis=0).reshape(-1)
        lam[a] = model.rate(flat, d_rep, u).reshape(times.size, B)
        run[a] = cost.running_batch(flat, u, t_abs).reshape(times.size, B)
    term = cost.terminal_batch(out[-1], h0 + times[-1])
    if M == 0:
        return term, None
    mids = 0.5 * (times[1:] + times[:-1])
    segs = np.clip(np.searchsorted(breaks, mids, side="right") - 1, 0, weights.shape[1] - 1)
    W = weights[:, segs, :].transpose(1, 0, 2)          # (M, B, A)
    steps = np.diff(times)[:, None]
    lamL = np.einsum("mba,amb->mb", W, lam[:, :-1])
    lamR = np.einsum("mba,amb->mb", W, lam[:, 1:])
    Lam = np.vstack([np.zeros(B), np.cumsum(0.5 * steps * (lamL + lamR), axis=0)])
    chi = np.exp(-Lam)
    costL = np.einsum("mba,amb->mb", W, run[:, :-1])
    costR = np.einsum("mba,amb->mb", W, run[:, 1:])
    cprime = np.sum(0.5 * steps * (chi[:-1] * costL + chi[1:] * costR), axis=0) + chi[-1] * term
    if not with_kernel:
        return cprime, None
    n_states = len(model.discrete_states)
    # post-jump law at each point under the step's control: sum_a W lam_a Q_a
    q = np.zeros((A, times.size, B, n_states))
    for a in range(A):
        u = np.repeat(atoms[None, :, a], times.size, axis=0).reshape(-1)
        q[a] = model.transition_matrix(flat, d_rep, u).reshape(times.size, B, n_states)
    qL = np.einsum("mba,amb,ambs->mbs", W, lam[:, :-1], q[:, :-1]) / lamL[..., None]
    qR = np.einsum("mba,amb,ambs->mbs", W, lam[:, 1:], q[:, 1:]) / lamR[..., None]
    half_mass = 0.5 * (chi[:-1] - chi[1:])
    wpt = np.zeros((times.size, B, n_states))
    wpt[:-1] += half_mass[..., None] * qL
    wpt[1:] += half_mass[..., None] * qR
    p_idx, b_idx, s_idx = np.nonzero(wpt > 0)
    return cprime, (b_idx, out[p_idx, b_idx], s_idx, h0[b_idx] + times[p_idx],
                    wpt[p_idx, b_idx, s_idx])


def _as_point(z):
    return z if isinstance(z, UpsilonPoint) else UpsilonPoint(*z)


def stage_cost(model, cost, z, rule, T, dt):
    """c'(z, rule): survival-weighted running cost plus terminal cost if no jump."""
    if z is CEMETERY:
        return 0.0
    return float(stage_terms(model, cost, [_as_point(z)], [rule], T, dt, False).cprime[0])


def _evaluate_targets(w, terms, grid=None):
    if isinstance(w, ValueTable):
        cols, wts, clamped = w.grid.interpolation(
            terms.coeffs[:, : w.grid.n_axes], terms.d_idx, terms.h)
        vals = np.sum(wts * w.values[cols], axis=1)
        return vals, int(clamped.sum())
    return np.asarray(w(terms.coeffs, terms.d_idx, terms.h), dtype=float), 0


def kernel_expectation(model, w, z, rule, T, dt):
    """Q'w(z, rule) for a ValueTable or a vectorized callable w(coeffs, d_idx, h)."""
    if z is CEMETERY:
        return 0.0
    terms = stage_terms(model, _ZERO_COST, [_as_point(z)], [rule], T, dt)
    vals, _ = _evaluate_targets(w, terms)
    return float(np.sum(terms.weight * vals))


def bellman_R(model, cost, w, z, rule, T, dt):
    """Rw(z, rule) = c'(z, rule) + Q'w(z, rule)."""
    if z is CEMETERY:
        return 0.0
    terms = stage_terms(model, cost, [_as_point(z)], [rule], T, dt)
    vals, _ = _evaluate_targets(w, terms)
    return float(terms.cprime[0] + np.sum(terms.weight * vals))


# ------------------------------------------------------- Bellman operator

@dataclass
class StageOperator:
    """Precomputed c' and interpolated kernel for every (grid node, rule)."""

    grid: ValueGrid
    family: list
    cprime: np.ndarray          # (n_nodes, n_rules)
    kernel: sp.csr_matrix       # (n_nodes * n_rules, n_nodes)
    clamped: int

    def R(self, w):
        return self.cprime + (self.kernel @ w).reshape(self.cprime.shape)

    def T(self, w):
        Rw = self.R(w)
        choice = np.argmin(Rw, axis=1)
        return Rw[np.arange(Rw.shape[0]), choice], choice


def build_stage_operator(model, cost, grid, family, T, dt):
    if model.discrete_states is None or tuple(model.discrete_states) != grid.d_values:
        raise ValueError("grid discrete states must match the model's")
    if model.K != grid.n_axes:
        raise ValueError("value grids need the model truncated to the grid's coefficient axes")
    if not family:
        raise ValueError("empty rule family")
    coeffs, d_idx, h = grid.nodes()
    N, R = grid.n_nodes, len(family)
    d_vals = np.array(grid.d_values)[d_idx]
    points, rules = [], []
    for n in range(N):
        z = UpsilonPoint(coeffs[n], d_vals[n].item(), h[n])
        for tmpl in family:
            points.append(z)
            rules.append(tmpl.rule(T - h[n]))
    terms = stage_terms(model, cost, points, rules, T, dt)
    cols, wts, clamped = grid.interpolation(terms.coeffs, terms.d_idx, terms.h)
    rows = np.repeat(terms.rows, cols.shape[1])
    vals = (terms.weight[:, None] * wts).ravel()
    kernel = sp.csr_matrix((vals, (rows, cols.ravel())), shape=(N * R, N))
    kernel.sum_duplicates()
    return StageOperator(grid, list(family), terms.cprime.reshape(N, R), kernel,
                         int(clamped.sum()))


@dataclass
class ValueIterationResult:
    table: ValueTable
    choice: np.ndarray
    family: list
    iterations: int
    diffs: list
    ratios: list
    C: float
    zeta: float
    clamped: int
    operator: StageOperator = field(repr=False)

    def policy(self, T):
        return PolicyStrategy(T, self.table.grid, [self.family[k].unit_rule for k in self.choice])

    def report(self):
        return {"C": self.C, "zeta_star": self.zeta, "iterations": self.iterations,
                "weighted_diffs": self.diffs, "ratios": self.ratios,
                "max_ratio_after_second": max(self.ratios[1:], default=0.0),
                "extrapolation_count": self.clamped,
                "weighted_norm": self.table.weighted_norm()}


def value_iteration(model, cost, bounding, grid, family, T, dt, tol=1e-6,
                    max_iter=10_000, operator=None):
    """Iterate w <- Tw from 0 until the weighted and sup differences are small.

    Stops when |w_{k+1} - w_k|_* <= tol (1 - C) / C and the plain sup
    difference is <= tol.  Raises ContractionViolation if the weighted
    differences fail to decrease three times in a row.
    """
    if bounding.C >= 1.0:
        raise ValueError("bounding does not certify a contraction")
    op = operator or build_stage_operator(model, cost, grid, family, T, dt)
    weights = node_weights(grid, bounding)
    C = bounding.C
    w = np.zeros(grid.n_nodes)
    choice = np.zeros(grid.n_nodes, dtype=int)
    diffs, ratios = [], []
    thresh = tol * (1.0 - C) / C
    for it in range(1, max_iter + 1):
        w_new, choice = op.T(w)
        dw = np.abs(w_new - w)
        diffs.append(float(np.max(dw / weights)))
        if len(diffs) > 1:
            ratios.append(diffs[-1] / diffs[-2] if diffs[-2] > 0 else 0.0)
        w = w_new
        if diffs[-1] <= thresh and dw.max() <= tol:
            break
        if len(diffs) >= 4 and diffs[-1] >= diffs[-2] >= diffs[-3] >= diffs[-4]:
            raise ContractionViolation(
                f"weighted differences stopped shrinking at iteration {it}: {diffs[-4:]}")
    else:
        raise ArithmeticError(f"value iteration did not converge in {max_iter} iterations")
    table = ValueTable(grid, w, bounding)
    return ValueIterationResult(table, choice, list(op.family), it, diffs, ratios, C,
                                bounding.zeta, op.clamped, op)


def bellman_T(operator, w):
    """(Tw, argmin rule index) on the grid."""
    return operator.T(np.asarray(w.values if isinstance(w, ValueTable) else w, dtype=float))


# ----------------------------------------------------------------- policy

class PolicyStrategy(Strategy):
    """Stationary policy: nearest grid node's rule stretched to T - h."""

    def __init__(self, T, grid, unit_rules):
        super().__init__(T)
        if len(unit_rules) != grid.n_nodes:
            raise ValueError("one rule per grid node is required")
        self.grid = grid
        self.unit_rules = list(unit_rules)
        self.relaxed = not all(r.is_ordinary() for r in self.unit_rules)

    def node_of(self, z):
        d_idx = self.grid.d_index(z.d if np.ndim(z.d) == 0 else z.d.item())
        return int(self.grid.nearest(z.nu[None, : self.grid.n_axes], [d_idx], z.h)[0])

    def rule(self, z):
        unit = self.unit_rules[self.node_of(z)]
        horizon = max(self.T - z.h, 0.0)
        return RelaxedRule(unit.breaks * horizon, unit.atoms, unit.weights)

    def barycentric(self, control_range=None):
        return PolicyStrategy(self.T, self.grid,
                              [barycenter_rule(r, control_range) for r in self.unit_rules])

    def to_dict(self):
        return {"T": self.T, "grid": self.grid.to_dict(),
                "rules": [r.to_dict() for r in self.unit_rules]}

    @classmethod
    def from_dict(cls, data):
        return cls(data["T"], ValueGrid.from_dict(data["grid"]),
                   [RelaxedRule.from_dict(r) for r in data["rules"]])


# ------------------------------------------------------------ Monte Carlo

_ZERO_COST = QuadraticCostSpec()


def _chunks(n_traj, chunk):
    return [(s, min(chunk, n_traj - s)) for s in range(0, n_traj, chunk)]


def _map(fn, tasks, workers):
    if workers is None or workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*tasks)))


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise ValueError("at least two trajectories are needed")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _path_costs(model, cost, strategy, z0, seed, stream, start, count, T, dt):
    rngs = trajectory_rngs(seed, start, count, stream)
    res = run_ensemble(model, strategy, [z0] * count, rngs, T, dt, cost=cost)
    return res.cost


def monte_carlo_cost(model, cost, strategy, z0, n_traj, seed, T, dt, workers=1,
                     chunk=2000, stream=0, return_samples=False):
    """Mean and standard error of the path cost int c dt + g(v_T)."""
    if n_traj < 2:
        raise ValueError("n_traj must be at least 2")
    tasks = [(model, cost, strategy, z0, seed, stream, s, c, T, dt)
             for s, c in _chunks(n_traj, chunk)]
    samples = np.concatenate(_map(_path_costs, tasks, workers))
    mean, se = _mean_se(samples)
    return (mean, se, samples) if return_samples else (mean, se)


def _chain_points(model, strategy, z0, seed, stream, start, count, T, dt):
    rngs = trajectory_rngs(seed, start, count, stream)
    return run_ensemble(model, strategy, [z0] * count, rngs, T, dt).points


def _chain_costs(model, cost, strategy, z0, seed, stream, start, count, T, dt, n_max):
    paths = _chain_points(model, strategy, z0, seed, stream, start, count, T, dt)
    pts, owner = [], []
    for k, path in enumerate(paths):
        for z in path[: n_max + 1]:
            pts.append(z)
            owner.append(k)
    rules = [strategy(z) for z in pts]
    res = run_ensemble(model, None, pts, None, T, dt, cost=cost, jumps=False,
                       rules=rules, survival_weighted=True)
    return np.bincount(np.array(owner), weights=res.cost, minlength=count)


def mdp_chain_cost(model, cost, strategy, z0, n_traj, seed, T, dt, bounding=None,
                   n_max=None, workers=1, chunk=2000, stream=1, return_samples=False):
    """Mean and standard error of sum_n c'(Z_n, mu(Z_n)) over the jump chain.

    The chain is truncated after n_max jumps; by default n_max is taken
    from the geometric tail bound so that the neglected part is < 1e-8.
    """
    if n_traj < 2:
        raise ValueError("n_traj must be at least 2")
    if n_max is None:
        n_max = bounding.n_max(bounding.B_star_point(z0)) if bounding else 1_000_000
    tasks = [(model, cost, strategy, z0, seed, stream, s, c, T, dt, n_max)
             for s, c in _chunks(n_traj, chunk)]
    samples = np.concatenate(_map(_chain_costs, tasks, workers))
    mean, se = _mean_se(samples)
    return (mean, se, samples) if return_samples else (mean, se)


def equivalence_verdict(v_est, j_est):
    """|V - J| <= 3 (se_V + se_J)."""
    gap = abs(v_est[0] - j_est[0])
    bound = 3.0 * (v_est[1] + j_est[1])
    return {"V": v_est[0], "se_V": v_est[1], "J": j_est[0], "se_J": j_est[1],
            "gap": gap, "bound": bound, "pass": bool(gap <= bound)}


def chain_bound_means(model, bounding, strategy, z0, n_traj, seed, T, dt, k_max=10,
                      stream=2):
    """Monte Carlo mean and standard error of B*(Z_k) for k = 0..k_max."""
    paths = _chain_points(model, strategy, z0, seed, stream, 0, n_traj, T, dt)
    vals = np.zeros((n_traj, k_max + 1))
    for i, path in enumerate(paths):
        for k in range(min(len(path), k_max + 1)):
            vals[i, k] = bounding.B_star_point(path[k])
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(n_traj)
    return mean, se
