"""Controlled PDMP on the enlarged state space.

Between jumps the continuous component follows the flow of ``flow``; jump
times are drawn by inverting the cumulative hazard against an Exp(1)
variable, and the discrete component then moves according to the
transition measure.  Control strategies map post-jump points (nu, d, h)
to a control rule used until the next jump.

Trajectories are advanced in lock-step batches: every row owns its own
random stream, its own time since the last jump and its own control rule,
so results for a given trajectory index do not depend on how the batch is
split.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .flow import (FlowBlowupError, RelaxedRule, SpectralField, flow_integrate,
                   lawson_step, mode_rates, relaxed_rate)

HAZARD_TOL = 1e-9


class Cemetery:
    """Absorbing state reached when no jump occurs before the horizon."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "CEMETERY"


CEMETERY = Cemetery()


# ------------------------------------------------------------ state types

@dataclass(frozen=True, eq=False)
class UpsilonPoint:
    """Post-jump point z = (nu, d, h): location, discrete state, jump time."""

    nu: np.ndarray
    d: Any
    h: float

    def __post_init__(self):
        nu = np.array(getattr(self.nu, "coeffs", self.nu), dtype=float).reshape(-1)
        nu.setflags(write=False)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "h", float(self.h))

    @property
    def field(self):
        return SpectralField(self.nu)

    def __repr__(self):
        return f"UpsilonPoint(nu={np.array2string(self.nu, precision=4)}, d={self.d!r}, h={self.h:.6g})"


@dataclass(frozen=True, eq=False)
class EnlargedState:
    """State (v, d, tau, h, nu) of the enlarged process plus a cemetery flag."""

    v: SpectralField
    d: Any
    tau: float
    h: float
    nu: SpectralField
    dead: bool = False

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("time since the last jump must be nonnegative")

    def upsilon(self):
        return UpsilonPoint(self.nu.coeffs, self.d, self.h)

    def within_horizon(self, T):
        return self.dead or self.h + self.tau <= T + 1e-12

    def coherence_error(self, chars, strategy, dt):
        """H-distance between v and the flow from nu over the elapsed time."""
        rule = strategy(self.upsilon())
        traj = flow_integrate(self.nu, self.d, rule, self.tau, dt,
                              chars.reaction, diffusivity=chars.diffusivity)
        return float(np.linalg.norm(traj.coeffs[-1] - self.v.coeffs))


class LocalCharacteristics:
    """Flow, jump rate and transition measure of a controlled PDMP.

    Subclasses provide batched ``rate(c, d, u)`` and ``reaction`` evaluators,
    a single-row ``sample_transition`` and ``transition_distribution``, and
    certified rate bounds ``delta <= lambda <= m_lambda``.  Models with a
    finite discrete state space list it in ``discrete_states`` and provide
    ``transition_matrix`` for the dynamic-programming solver.
    """

    K: int
    diffusivity: float = 1.0
    delta: float
    m_lambda: float
    u_min: float
    u_max: float
    reaction: Any
    discrete_states: Optional[tuple] = None

    def rate(self, c, d, u):
        raise NotImplementedError

    def sample_transition(self, c, d, u, rng):
        raise NotImplementedError

    def transition_distribution(self, c, d, u):
        """Targets and probabilities of the post-jump discrete state."""
        raise NotImplementedError

    def transition_matrix(self, c, d, u):
        """Rows of probabilities over ``discrete_states`` (finite models only)."""
        raise NotImplementedError

    def state_index(self, d):
        return self.discrete_states.index(d)

    def state_label(self, d):
        return str(d)

    def check_control(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < self.u_min - 1e-12) or np.any(u > self.u_max + 1e-12):
            raise ValueError(f"control outside [{self.u_min}, {self.u_max}]")


# ----------------------------------------------------------- strategies

class Strategy:
    """Map from post-jump points to control rules on [0, T - h]."""

    relaxed = False

    def __init__(self, T):
        self.T = float(T)

    def rule(self, z):
        raise NotImplementedError

    def __call__(self, z):
        rule = self.rule(z)
        need = self.T - z.h
        if rule.horizon + 1e-9 * max(1.0, self.T) < need:
            raise ValueError(f"strategy returned a rule of length {rule.horizon}, "
                             f"needed {need}")
        return rule


class ConstantStrategy(Strategy):
    """Same control (or relaxed mixture) after every jump."""

    def __init__(self, T, u=None, atoms=None, weights=None):
        super().__init__(T)
        if u is not None:
            atoms, weights = [float(u)], [1.0]
        self.atoms = np.asarray(atoms, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.relaxed = self.atoms.size > 1
        RelaxedRule.mixture(self.atoms, self.weights, 1.0)

    def rule(self, z):
        return RelaxedRule([0.0, max(self.T - z.h, 0.0)], self.atoms, self.weights[None, :])


class TemplateStrategy(Strategy):
    """A rule on [0, 1] stretched to the remaining horizon after each jump."""

    def __init__(self, T, template):
        super().__init__(T)
        self.template = template.scaled(1.0)
        self.relaxed = not template.is_ordinary()

    def rule(self, z):
        return RelaxedRule(self.template.breaks * max(self.T - z.h, 0.0),
                           self.template.atoms, self.template.weights)


class OpenLoopStrategy(Strategy):
    """Ordinary control given as a function of absolute time (piecewise constant)."""

    def __init__(self, T, times, values):
        super().__init__(T)
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.times.size != self.values.size or self.times[0] != 0.0:
            raise ValueError("schedule needs matching times and values, starting at 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("schedule times must be increasing")

    def rule(self, z):
        horizon = max(self.T - z.h, 0.0)
        inner = self.times[(self.times > z.h) & (self.times < self.T)] - z.h
        breaks = np.concatenate([[0.0], inner, [horizon]])
        first = np.searchsorted(self.times, z.h, side="right") - 1
        vals = self.values[first:first + breaks.size - 1]
        if horizon == 0.0:
            return RelaxedRule.constant(vals[0], 0.0)
        return RelaxedRule.ordinary(breaks, vals)


class FunctionStrategy(Strategy):
    def __init__(self, T, func, relaxed=False):
        super().__init__(T)
        self.func = func
        self.relaxed = relaxed

    def rule(self, z):
        return self.func(z)


# ----------------------------------------------------------------- RNG

def trajectory_rng(master_seed, index, stream=0):
    """Independent counter-based stream for trajectory ``index``.

    ``stream`` separates estimators that must not share random numbers.
    """
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(seq))


def trajectory_rngs(master_seed, start, count, stream=0):
    return [trajectory_rng(master_seed, i, stream) for i in range(start, start + count)]


# --------------------------------------------------------------- engine

class RuleBank:
    """Control rules of many rows packed into padded arrays."""

    def __init__(self, n):
        self.breaks = np.zeros((n, 2))
        self.breaks[:, 1] = np.inf
        self.atoms = np.zeros((n, 1))
        self.weights = np.ones((n, 1, 1))

    def _grow(self, n_seg, n_atoms):
        n, cols = self.breaks.shape
        if n_seg + 1 > cols:
            pad = np.full((n, n_seg + 1 - cols), np.inf)
            self.breaks = np.hstack([self.breaks, pad])
        S, A = self.weights.shape[1:]
        if n_atoms > A:
            self.atoms = np.hstack([self.atoms, np.zeros((n, n_atoms - A))])
        if n_seg > S or n_atoms > A:
            w = np.zeros((n, max(S, n_seg), max(A, n_atoms)))
            w[:, :S, :A] = self.weights
            self.weights = w

    def assign(self, row, rule):
        S, A = rule.n_segments, rule.atoms.size
        self._grow(S, A)
        self.breaks[row] = np.inf
        self.breaks[row, :S + 1] = rule.breaks
        self.atoms[row] = 0.0
        self.atoms[row, :A] = rule.atoms
        self.weights[row] = 0.0
        self.weights[row, :S, :A] = rule.weights

    def segment(self, rows, t):
        return np.sum(self.breaks[rows, 1:] <= t[:, None], axis=1)

    def next_break(self, rows, t):
        b = self.breaks[rows, 1:]
        return np.where(b > t[:, None] + 1e-12, b, np.inf).min(axis=1)


def hazard_root(Lam0, lam0, lam1, h, E, tol=HAZARD_TOL):
    """Time s in (0, h] where the trapezoid-interpolated hazard reaches E.

    Within a step the rate is taken linear between its end values, which is
    the interpolant consistent with trapezoid accumulation; the root is
    bracketed by bisection to ``tol``.
    """
    if np.any(lam0 < 0) or np.any(lam1 < 0):
        raise ArithmeticError("negative jump rate: cumulative hazard not monotone")
    slope = (lam1 - lam0) / h
    lo = np.zeros_like(h)
    hi = h.copy()
    n_iter = int(np.ceil(np.log2(max(float(np.max(h)), tol) / tol))) + 1
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        above = Lam0 + mid * (lam0 + 0.5 * slope * mid) >= E
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return hi


@dataclass
class DenseTrajectory:
    """Samples of (t, v_t, d_t) on the flow grid, right-continuous at jumps."""

    times: np.ndarray
    coeffs: np.ndarray
    d: list

    def csv_rows(self, label=str):
        K = self.coeffs.shape[1]
        header = ["t"] + [f"coeff_{k}" for k in range(1, K + 1)] + ["d"]
        rows = [[t, *c, label(d)] for t, c, d in zip(self.times, self.coeffs, self.d)]
        return header, rows


@dataclass
class SamplePath:
    """Post-jump points Z_0, Z_1, ... of one trajectory and optional extras."""

    points: list
    T: float
    dense: Optional[DenseTrajectory] = None
    cost: Optional[float] = None
    final: Optional[np.ndarray] = None

    @property
    def n_jumps(self):
        return len(self.points) - 1

    @property
    def jump_times(self):
        return np.array([z.h for z in self.points[1:]])

    def csv_rows(self, label=str):
        K = self.points[0].nu.size
        header = ["n", "T_n", "d_n"] + [f"nu_{k}" for k in range(1, K + 1)]
        rows = [[n, z.h, label(z.d), *z.nu] for n, z in enumerate(self.points)]
        return header, rows


@dataclass
class EnsembleResult:
    points: list
    cost: Optional[np.ndarray]
    final: np.ndarray
    final_d: list
    dense: dict = field(default_factory=dict)
    first_jump: Optional[np.ndarray] = None


def run_ensemble(chars, strategy, z0s, rngs, T, dt, *, cost=None, jumps=True,
                 rules=None, survival_weighted=False, record_dense=(),
                 observer=None, first_jump_only=False, scheme="rk4",
                 max_jumps=1_000_000):
    """Advance a batch of trajectories from post-jump points z0s up to time T.

    cost: optional cost spec with ``running_batch(c, u, t)`` and
        ``terminal_batch(c, t)``; running costs are integrated by the
        trapezoid rule (weighted by the survival function when
        ``survival_weighted``) and the terminal cost is added at T.
    jumps: when False the flow is integrated to the horizon without jumps
        (used for stage costs); ``rules`` may then give the rule of each row.
    first_jump_only: stop each row at its first jump, returning its time.
    """
    B = len(z0s)
    K = chars.K
    reaction, rate = chars.reaction, chars.rate
    rates = mode_rates(K, chars.diffusivity)
    c = np.array([z.nu for z in z0s], dtype=float).reshape(B, K)
    d = np.asarray([np.asarray(getattr(z.d, "states", z.d)) for z in z0s])
    hl = np.array([z.h for z in z0s], dtype=float)
    tau = np.zeros(B)
    Lam = np.zeros(B)
    E = np.full(B, np.inf)
    lam0 = np.zeros(B)
    crun0 = np.zeros(B)
    seg_c = np.full(B, -1)
    acc = np.zeros(B)
    alive = np.ones(B, dtype=bool)
    bank = RuleBank(B)
    points = [[z] for z in z0s]
    n_jumps = np.zeros(B, dtype=int)
    first = np.full(B, np.nan) if first_jump_only else None
    dense = {int(r): ([], [], []) for r in record_dense}

    def record(rows, t):
        for r in rows:
            if r in dense:
                dense[r][0].append(float(t[r]))
                dense[r][1].append(c[r].copy())
                dense[r][2].append(d[r].copy() if d.ndim > 1 else d[r].item())

    def start_interval(r, z):
        rule = rules[r] if rules is not None else strategy(z)
        bank.assign(r, rule)
        if jumps:
            E[r] = rngs[r].exponential()

    for r in range(B):
        start_interval(r, z0s[r])
    record(range(B), hl + tau)
    if observer is not None:
        observer(np.arange(B), hl.copy(), c, d)

    def finish(rows):
        alive[rows] = False
        if cost is not None and rows.size:
            g = cost.terminal_batch(c[rows], hl[rows] + tau[rows])
            if survival_weighted:
                g = g * np.exp(-Lam[rows])
            acc[rows] += g

    finish(np.flatnonzero(T - hl <= 1e-12))

    while True:
        A = np.flatnonzero(alive)
        if A.size == 0:
            break
        tA = tau[A]
        hor = T - hl[A]
        grid_next = (np.floor(tA / dt + 1e-7) + 1.0) * dt
        stop = np.minimum(np.minimum(grid_next, bank.next_break(A, tA)), hor)
        step = stop - tA
        seg = bank.segment(A, tA + 0.5 * step)
        U = bank.atoms[A]
        W = bank.weights[A, seg]
        cA, dA = c[A], d[A]
        stale = seg != seg_c[A]
        if np.any(stale):
            s_rows = A[stale]
            lam0[s_rows] = relaxed_rate(rate, cA[stale], dA[stale], U[stale], W[stale])
            if cost is not None:
                crun0[s_rows] = _relaxed_cost(cost, cA[stale], U[stale], W[stale],
                                              hl[s_rows] + tA[stale])
        c_new = lawson_step(reaction, cA, dA, U, W, step, rates, scheme)
        bad = ~np.all(np.isfinite(c_new), axis=1)
        if np.any(bad):
            raise FlowBlowupError(float(np.min((hl[A] + stop)[bad])))
        lam1 = relaxed_rate(rate, c_new, dA, U, W)
        Lam1 = Lam[A] + 0.5 * step * (lam0[A] + lam1)
        jumped = Lam1 >= E[A] if jumps else np.zeros(A.size, dtype=bool)
        ok = ~jumped

        # rows that completed the step without a jump
        R = A[ok]
        if cost is not None:
            cr1 = _relaxed_cost(cost, c_new[ok], U[ok], W[ok], hl[R] + stop[ok])
            if survival_weighted:
                acc[R] += 0.5 * step[ok] * (np.exp(-Lam[R]) * crun0[R] + np.exp(-Lam1[ok]) * cr1)
            else:
                acc[R] += 0.5 * step[ok] * (crun0[R] + cr1)
            crun0[R] = cr1
        c[R] = c_new[ok]
        tau[R] = stop[ok]
        Lam[R] = Lam1[ok]
        lam0[R] = lam1[ok]
        seg_c[R] = seg[ok]
        if dense:
            record(R, hl + tau)
        if observer is not None:
            observer(R, hl[R] + tau[R], c[R], d[R])
        finish(R[stop[ok] >= hor[ok] - 1e-12])

        if not np.any(jumped):
            continue
        J = A[jumped]
        s = hazard_root(Lam[J], lam0[J], lam1[jumped], step[jumped], E[J])
        UJ, WJ = U[jumped], W[jumped]
        cj = lawson_step(reaction, cA[jumped], dA[jumped], UJ, WJ, s, rates, scheme)
        t_jump = hl[J] + tA[jumped] + s
        if cost is not None:
            crj = _relaxed_cost(cost, cj, UJ, WJ, t_jump)
            acc[J] += 0.5 * s * (crun0[J] + crj)
        if first_jump_only:
            first[J] = tA[jumped] + s
            c[J] = cj
            tau[J] = tA[jumped] + s
            alive[J] = False
            continue
        atom_rates = np.stack([rate(cj, dA[jumped], UJ[:, a]) for a in range(UJ.shape[1])], axis=1)
        atom_p = WJ * atom_rates
        for i, r in enumerate(J):
            rng = rngs[r]
            p = atom_p[i]
            a = int(np.flatnonzero(p > 0)[0]) if np.count_nonzero(p) == 1 else \
                int(rng.choice(p.size, p=p / p.sum()))
            d_new = chars.sample_transition(cj[i], d[r], UJ[i, a], rng)
            n_jumps[r] += 1
            if n_jumps[r] > max_jumps:
                raise ArithmeticError(f"trajectory {r} exceeded {max_jumps} jumps")
            c[r] = cj[i]
            d[r] = d_new
            hl[r] = t_jump[i]
            tau[r] = 0.0
            Lam[r] = 0.0
            seg_c[r] = -1
            z = UpsilonPoint(cj[i], d_new if d.ndim == 1 else np.array(d_new), t_jump[i])
            points[r].append(z)
            start_interval(r, z)
        record(J, hl + tau)
        if observer is not None:
            observer(J, hl[J].copy(), c[J], d[J])
        finish(J[T - hl[J] <= 1e-12])

    dense_out = {r: DenseTrajectory(np.array(v[0]), np.array(v[1]), v[2])
                 for r, v in dense.items()}
    final_d = [d[r].copy() if d.ndim > 1 else d[r].item() for r in range(B)]
    return EnsembleResult(points, acc if cost is not None else None, c.copy(),
                          final_d, dense_out, first)


def _relaxed_cost(cost, c, U, W, t):
    out = np.zeros(c.shape[0])
    for a in range(U.shape[1]):
        wa = W[:, a]
        if np.any(wa > 0):
            out += wa * cost.running_batch(c, U[:, a], t)
    return out


# ------------------------------------------------------------ operations

def default_dt(T):
    return 1e-4 * T


def survival(chars, z, rule, t, dt):
    """chi_t(z) = exp(-int_0^t lambda along the controlled flow)."""
    if t < 0 or t > rule.horizon + 1e-12:
        raise ValueError(f"survival time {t} outside [0, {rule.horizon}]")
    traj = flow_integrate(z.nu, z.d, rule, t, dt, chars.reaction, chars.rate,
                          chars.diffusivity)
    return float(np.exp(-traj.hazard[-1]))


def sample_jump_time(chars, z, rule, rng, dt):
    """First jump time after z under ``rule`` (None if the horizon comes first).

    Returns (time or None, coefficients of the flow at that time).
    """
    T = z.h + rule.horizon
    strat = FunctionStrategy(T, lambda _: rule)
    res = run_ensemble(chars, strat, [z], [rng], T, dt, first_jump_only=True)
    t = res.first_jump[0]
    return (None if np.isnan(t) else float(t)), res.final[0]


def sample_post_jump(chars, v, d, u, rng):
    """Draw the post-jump discrete state; the continuous component is kept."""
    return chars.sample_transition(np.asarray(getattr(v, "coeffs", v), float), d, u, rng)


def simulate(chars, z0, strategy, rng, T, dt, dense=False, cost=None):
    """One controlled trajectory from z0 up to the horizon T."""
    res = run_ensemble(chars, strategy, [z0], [rng], T, dt, cost=cost,
                       record_dense=(0,) if dense else ())
    return SamplePath(res.points[0], T, res.dense.get(0),
                      None if res.cost is None else float(res.cost[0]), res.final[0])


def simulate_many(chars, z0, strategy, master_seed, n_traj, T, dt, start=0,
                  cost=None, dense=(), observer=None):
    """n_traj trajectories from the same z0 with streams start..start+n_traj-1."""
    rngs = trajectory_rngs(master_seed, start, n_traj)
    return run_ensemble(chars, strategy, [z0] * n_traj, rngs, T, dt, cost=cost,
                        record_dense=dense, observer=observer)


def embedded_chain(path):
    """Post-jump points (nu_k, d_k, T_k) followed by the cemetery."""
    return list(path.points) + [CEMETERY]


def reconstruct_dense(chars, chain, strategy, T, dt):
    """Rebuild the dense trajectory from the jump chain by re-running the flow."""
    pts = [z for z in chain if z is not CEMETERY]
    times, coeffs, ds = [], [], []
    for k, z in enumerate(pts):
        end = pts[k + 1].h if k + 1 < len(pts) else T
        rule = strategy(z)
        traj = flow_integrate(z.nu, z.d, rule, end - z.h, dt, chars.reaction,
                              diffusivity=chars.diffusivity)
        last = k + 1 == len(pts)
        n = traj.times.size if last else traj.times.size - 1
        for i in range(n):
            times.append(z.h + traj.times[i])
            coeffs.append(traj.coeffs[i])
            ds.append(z.d)
    return DenseTrajectory(np.array(times), np.array(coeffs), ds)
