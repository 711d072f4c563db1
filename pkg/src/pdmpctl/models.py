"""Concrete local characteristics.

* ``HHChR2Model``: spatially extended Hodgkin-Huxley membrane with
  stochastic Na, K and ChR2 channels at the sites i/N, each site feeling
  the potential through a mollified point evaluation.
* ``ElementaryModel``: two-state linear example with flow (d + u) v.
* ``ConstantRateModel``: constant jump rate, no reaction; useful as a
  jump-law oracle.
"""

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from .flow import ReactionTerm, ZERO_REACTION, mollifier_matrix, norms
from .pdmp import LocalCharacteristics

RATE_FLOOR = 1e-6
SERIES_CUTOFF = 1e-4


# ----------------------------------------------------------- gating rates

def x_over_expm1(x):
    """x / (e^x - 1) with the removable singularity at 0 filled by a series."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < SERIES_CUTOFF
    safe = np.where(small, 1.0, x)
    direct = safe / np.expm1(safe)
    series = 1.0 - x / 2.0 + x * x / 12.0
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


class GatingRates(NamedTuple):
    alpha_n: np.ndarray
    beta_n: np.ndarray
    alpha_m: np.ndarray
    beta_m: np.ndarray
    alpha_h: np.ndarray
    beta_h: np.ndarray


def gating_rates(v):
    """Hodgkin-Huxley opening and closing rates at membrane potential v (mV)."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("potential must be finite")
    return GatingRates(
        alpha_n=0.1 * x_over_expm1(1.0 - 0.1 * v),
        beta_n=0.125 * np.exp(-v / 80.0),
        alpha_m=x_over_expm1(2.5 - 0.1 * v),
        beta_m=4.0 * np.exp(-v / 18.0),
        alpha_h=0.07 * np.exp(-v / 20.0),
        beta_h=1.0 / (np.exp(3.0 - 0.1 * v) + 1.0),
    )


# --------------------------------------------------------------- params

@dataclass(frozen=True)
class HHParams:
    """Conductances, reversal potentials and ChR2 kinetics (configuration defaults)."""

    g_K: float = 36.0
    g_Na: float = 120.0
    g_L: float = 0.3
    g_ChR2: float = 0.65
    V_K: float = -12.0
    V_Na: float = 115.0
    V_L: float = 10.6
    V_ChR2: float = 60.0
    rho: float = 0.1
    C_m: float = 1.0
    eps1: float = 0.5
    eps2: float = 0.1
    e12: float = 0.05
    e21: float = 0.01
    K_d1: float = 0.13
    K_d2: float = 0.025
    K_r: float = 0.0004
    K_d: float = 0.13
    u_max: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not np.isfinite(val):
                raise ValueError(f"{f.name} must be finite")
            if not f.name.startswith("V_") and val <= 0:
                raise ValueError(f"{f.name} must be positive, got {val}")
        if not self.v_minus < self.v_plus:
            raise ValueError("reversal potentials must not all coincide")

    @property
    def v_minus(self):
        return min(self.V_K, self.V_Na, self.V_L, self.V_ChR2)

    @property
    def v_plus(self):
        return max(self.V_K, self.V_Na, self.V_L, self.V_ChR2)

    def to_dict(self):
        return asdict(self)


def chr2_rates(v, u, variant="four-state", params=HHParams(), floor=RATE_FLOOR):
    """Per-edge ChR2 rates {(source, target): rate}; v does not enter."""
    if not 0.0 <= u <= params.u_max:
        raise ValueError(f"light intensity {u} outside [0, {params.u_max}]")
    if variant == "four-state":
        raw = {("c1", "o1"): params.eps1 * u, ("o1", "c1"): params.K_d1,
               ("o1", "o2"): params.e12, ("o2", "o1"): params.e21,
               ("o2", "c2"): params.K_d2, ("c2", "o2"): params.eps2 * u,
               ("c2", "c1"): params.K_r}
    elif variant == "three-state":
        raw = {("c", "o"): float(u), ("o", "d"): params.K_d, ("d", "c"): params.K_r}
    else:
        raise ValueError(f"unknown ChR2 variant {variant!r}")
    return {k: max(r, floor) for k, r in raw.items()}


# ------------------------------------------------------- channel states

K_STATES = ("n0", "n1", "n2", "n3", "n4")
NA_STATES = ("m0h1", "m1h1", "m2h1", "m3h1", "m0h0", "m1h0", "m2h0", "m3h0")
CHR2_STATES = {"four-state": ("o1", "o2", "c1", "c2"), "three-state": ("c", "o", "d")}
CHANNEL_TYPES = ("Na", "K", "ChR2")
REST_STATE = {"K": "n0", "Na": "m0h1", "four-state": "c1", "three-state": "c"}

# basis columns: six gating rates, two light terms, constant
BASIS = ("alpha_n", "beta_n", "alpha_m", "beta_m", "alpha_h", "beta_h",
         "light1", "light2", "one")


def _gate_edges(h_transitions):
    edges = []
    for j in range(4):
        edges.append((f"n{j}", f"n{j + 1}", "alpha_n", 4 - j))
        edges.append((f"n{j + 1}", f"n{j}", "beta_n", j + 1))
    for hk in (1, 0):
        for j in range(3):
            edges.append((f"m{j}h{hk}", f"m{j + 1}h{hk}", "alpha_m", 3 - j))
            edges.append((f"m{j + 1}h{hk}", f"m{j}h{hk}", "beta_m", j + 1))
    if h_transitions:
        for j in range(4):
            edges.append((f"m{j}h1", f"m{j}h0", "beta_h", 1))
            edges.append((f"m{j}h0", f"m{j}h1", "alpha_h", 1))
    return edges


def _chr2_edges(variant, p, floor):
    if variant == "four-state":
        return [("c1", "o1", "light1", 1.0), ("o1", "c1", "one", max(p.K_d1, floor)),
                ("o1", "o2", "one", max(p.e12, floor)), ("o2", "o1", "one", max(p.e21, floor)),
                ("o2", "c2", "one", max(p.K_d2, floor)), ("c2", "o2", "light2", 1.0),
                ("c2", "c1", "one", max(p.K_r, floor))]
    return [("c", "o", "light1", 1.0), ("o", "d", "one", max(p.K_d, floor)),
            ("d", "c", "one", max(p.K_r, floor))]


@dataclass(frozen=True, eq=False)
class ChannelConfig:
    """Per-site channel states, one byte per site."""

    states: np.ndarray

    def __post_init__(self):
        s = np.array(self.states, dtype=np.uint8).reshape(-1)
        s.setflags(write=False)
        object.__setattr__(self, "states", s)

    def labels(self, model):
        return [model.state_names[s] for s in self.states]

    @classmethod
    def from_labels(cls, labels, model):
        return cls(model.encode(labels))

    def __eq__(self, other):
        return isinstance(other, ChannelConfig) and np.array_equal(self.states, other.states)

    def __hash__(self):
        return hash(self.states.tobytes())


def _states_of(d):
    return np.asarray(getattr(d, "states", d))


class HHChR2Model(LocalCharacteristics):
    """Stochastic Hodgkin-Huxley-ChR2 membrane with channels at sites i/N.

    The membrane potential v is a sine series with K modes; site i reads the
    potential through the mollified pairing p_i = (xi_i, v).  The reaction
    feeds the ionic currents back through the same mollifiers scaled by 1/N,
    and diffusion is scaled by 1/C_m.  Rates see p clamped to [V_-, V_+].
    """

    def __init__(self, N=10, K=64, params=None, chr2_variant="four-state",
                 site_map=None, h_transitions=True, rate_floor=RATE_FLOOR):
        if int(N) != N or N < 2:
            raise ValueError("N must be an integer >= 2")
        if chr2_variant not in CHR2_STATES:
            raise ValueError(f"unknown ChR2 variant {chr2_variant!r}")
        if rate_floor <= 0:
            raise ValueError("rate floor must be positive")
        self.N, self.K = int(N), int(K)
        self.params = params or HHParams()
        self.chr2_variant = chr2_variant
        self.h_transitions = bool(h_transitions)
        self.rate_floor = float(rate_floor)
        n_sites = self.N - 1
        if site_map is None:
            site_map = [CHANNEL_TYPES[i % 3] for i in range(n_sites)]
        site_map = list(site_map)
        if len(site_map) != n_sites or any(t not in CHANNEL_TYPES for t in site_map):
            raise ValueError(f"site map needs {n_sites} entries from {CHANNEL_TYPES}")
        self.site_map = tuple(site_map)
        self.diffusivity = 1.0 / self.params.C_m
        self.u_min, self.u_max = 0.0, self.params.u_max
        self.v_minus, self.v_plus = self.params.v_minus, self.params.v_plus

        self.state_names = K_STATES + NA_STATES + CHR2_STATES[chr2_variant]
        self.code = {s: i for i, s in enumerate(self.state_names)}
        n_states = len(self.state_names)
        alphabets = {"K": K_STATES, "Na": NA_STATES, "ChR2": CHR2_STATES[chr2_variant]}
        self.site_alphabet = [np.array([self.code[s] for s in alphabets[t]]) for t in site_map]

        p = self.params
        edges = [(self.code[a], self.code[b], BASIS.index(k), float(m))
                 for a, b, k, m in _gate_edges(self.h_transitions)
                 + _chr2_edges(chr2_variant, p, self.rate_floor)]
        self.edges = edges
        self.edge_src = np.array([e[0] for e in edges])
        self.edge_dst = np.array([e[1] for e in edges])
        self.edge_basis = np.array([e[2] for e in edges])
        self.edge_mult = np.array([e[3] for e in edges])
        max_deg = np.bincount(self.edge_src, minlength=n_states).max()
        self.out_edges = np.full((n_states, max_deg), -1)
        for s in range(n_states):
            ids = np.flatnonzero(self.edge_src == s)
            self.out_edges[s, :ids.size] = ids
        # out-rate of each state as a combination of basis columns
        self.out_coeffs = np.zeros((n_states, len(BASIS)))
        np.add.at(self.out_coeffs, (self.edge_src, self.edge_basis), self.edge_mult)

        # conductance and reversal potential of each state's current
        self.state_g = np.zeros(n_states)
        self.state_v = np.zeros(n_states)
        self.state_g[self.code["n4"]], self.state_v[self.code["n4"]] = p.g_K, p.V_K
        self.state_g[self.code["m3h1"]], self.state_v[self.code["m3h1"]] = p.g_Na, p.V_Na
        if chr2_variant == "four-state":
            self.state_g[self.code["o1"]] = p.g_ChR2
            self.state_g[self.code["o2"]] = p.g_ChR2 * p.rho
            self.state_v[[self.code["o1"], self.code["o2"]]] = p.V_ChR2
        else:
            self.state_g[self.code["o"]], self.state_v[self.code["o"]] = p.g_ChR2, p.V_ChR2

        self.moll = np.array(mollifier_matrix(self.N, self.K))
        self.moll_t = np.ascontiguousarray(self.moll.T)
        lipschitz = 4.0 * self.N ** 2 * (p.g_K + p.g_Na + p.g_ChR2 * (1 + p.rho) + p.g_L)
        moll_norms = norms(self.moll)
        worst = max(p.g_K * abs(p.V_K), p.g_Na * abs(p.V_Na), p.g_ChR2 * abs(p.V_ChR2))
        b1 = float(np.sum((worst + p.g_L * abs(p.V_L)) * moll_norms) / self.N)
        self.reaction = ReactionTerm(self._reaction, lipschitz, b1, lipschitz, True)
        self.delta, self.m_lambda = self._rate_bounds()

    # configuration helpers
    def encode(self, labels):
        codes = np.array([self.code[s] for s in labels], dtype=np.uint8)
        self._check_config(codes)
        return codes

    def _check_config(self, codes):
        if codes.shape != (self.N - 1,):
            raise ValueError(f"configuration needs {self.N - 1} sites")
        for i, c in enumerate(codes):
            if c not in self.site_alphabet[i]:
                raise ValueError(f"site {i + 1} ({self.site_map[i]}) cannot be in state "
                                 f"{self.state_names[c] if c < len(self.state_names) else c}")

    def rest_config(self):
        """All channels closed and inactive-free: n0, m0h1, c1 (or c)."""
        rest = {"K": REST_STATE["K"], "Na": REST_STATE["Na"],
                "ChR2": REST_STATE[self.chr2_variant]}
        return ChannelConfig(self.encode([rest[t] for t in self.site_map]))

    def state_label(self, d):
        return "|".join(self.state_names[s] for s in _states_of(d))

    # pairings and basis
    def pairings(self, c):
        """Mollified point values p_i = (xi_i, v), shape (B, N-1)."""
        return np.asarray(c, dtype=float) @ self.moll_t

    def _basis(self, p, u):
        p = np.clip(p, self.v_minus, self.v_plus)
        g = gating_rates(p)
        u = np.broadcast_to(np.asarray(u, dtype=float)[:, None], p.shape)
        cols = [np.maximum(x, self.rate_floor) for x in g]
        pr = self.params
        if self.chr2_variant == "four-state":
            cols += [np.maximum(pr.eps1 * u, self.rate_floor),
                     np.maximum(pr.eps2 * u, self.rate_floor)]
        else:
            cols += [np.maximum(u, self.rate_floor), np.zeros_like(p)]
        cols.append(np.ones_like(p))
        return np.stack(cols, axis=-1)

    def _reaction(self, c, d, u):
        p = self.pairings(c)
        d = np.asarray(d, dtype=np.intp)
        pr = self.params
        current = self.state_g[d] * (self.state_v[d] - p) + pr.g_L * (pr.V_L - p)
        return current @ self.moll / self.N

    def rate(self, c, d, u):
        basis = self._basis(self.pairings(c), u)
        coeff = self.out_coeffs[np.asarray(d, dtype=np.intp)]
        return np.einsum("bsk,bsk->b", coeff, basis)

    def edge_rates(self, c, d, u):
        """Rates of the outgoing edges of every site, shape (N-1, max_deg)."""
        d = _states_of(d).astype(np.intp)
        basis = self._basis(self.pairings(np.asarray(c)[None, :]), np.array([float(u)]))[0]
        ids = self.out_edges[d]
        valid = ids >= 0
        ids0 = np.where(valid, ids, 0)
        r = self.edge_mult[ids0] * np.take_along_axis(basis, self.edge_basis[ids0], axis=1)
        return np.where(valid, r, 0.0), ids0, valid

    def transition_distribution(self, c, d, u):
        r, ids, valid = self.edge_rates(c, d, u)
        states = _states_of(d)
        targets, probs = [], []
        total = r.sum()
        if total <= 0:
            raise ArithmeticError("transition weights sum to zero")
        for i, j in zip(*np.nonzero(valid)):
            new = states.astype(np.uint8).copy()
            new[i] = self.edge_dst[ids[i, j]]
            targets.append(ChannelConfig(new))
            probs.append(r[i, j] / total)
        return targets, np.array(probs)

    def sample_transition(self, c, d, u, rng):
        r, ids, _ = self.edge_rates(c, d, u)
        flat = r.ravel()
        total = flat.sum()
        if total <= 0:
            raise ArithmeticError("transition weights sum to zero")
        k = min(int(np.searchsorted(np.cumsum(flat), rng.random() * total, side="right")),
                flat.size - 1)
        while flat[k] == 0.0:
            k -= 1
        i, j = divmod(k, r.shape[1])
        new = _states_of(d).astype(np.uint8).copy()
        new[i] = self.edge_dst[ids[i, j]]
        return new

    def _rate_bounds(self):
        # every basis column is monotone in v and u, so its extremes over the
        # clamped domain sit at the corners
        p = np.array([[self.v_minus, self.v_plus]] * 2)
        u = np.array([0.0, self.u_max])
        b = self._basis(p, u).reshape(-1, len(BASIS))
        hi_col, lo_col = b.max(axis=0), b.min(axis=0)
        out_hi = self.out_coeffs @ hi_col
        out_lo = self.out_coeffs @ lo_col
        m_lambda = sum(out_hi[a].max() for a in self.site_alphabet)
        delta = sum(out_lo[a].min() for a in self.site_alphabet)
        return float(delta), float(m_lambda)


def hh_lambda(model, v, d, u):
    """Total jump rate of one HH-ChR2 configuration."""
    model.check_control(u)
    c = np.asarray(getattr(v, "coeffs", v), dtype=float)
    return float(model.rate(c[None, :], _states_of(d)[None, :], np.array([float(u)]))[0])


def hh_transition(model, v, d, u, rng):
    c = np.asarray(getattr(v, "coeffs", v), dtype=float)
    return ChannelConfig(model.sample_transition(c, d, u, rng))


def hh_reaction(model, v, d):
    return model.reaction(v, _states_of(d), 0.0)


# ------------------------------------------------------ elementary model

class ElementaryModel(LocalCharacteristics):
    """Flow (d + u) v, d in {-1, 1} flipping at every jump.

    lambda_1 = 1/(exp(-|v|^2) + 1) + u^2 and
    lambda_-1 = exp(-1/(|v|^2 + 1)) + u^2 with the H norm.
    """

    discrete_states = (-1, 1)

    def __init__(self, K=1, u_max=1.0):
        if u_max < 0:
            raise ValueError("u_max must be nonnegative")
        self.K = int(K)
        self.u_min, self.u_max = -float(u_max), float(u_max)
        self.diffusivity = 1.0
        growth = 1.0 + self.u_max
        self.reaction = ReactionTerm(self._reaction, growth, 0.0, growth, True)
        self.delta = float(np.exp(-1.0)) - 1e-12
        self.m_lambda = 2.0 + self.u_max ** 2

    @staticmethod
    def _reaction(c, d, u):
        return (np.asarray(d, dtype=float) + u)[:, None] * c

    def rate(self, c, d, u):
        r2 = np.sum(np.asarray(c) ** 2, axis=-1)
        base = np.where(np.asarray(d) > 0, 1.0 / (np.exp(-r2) + 1.0), np.exp(-1.0 / (r2 + 1.0)))
        return base + np.asarray(u, dtype=float) ** 2

    def sample_transition(self, c, d, u, rng):
        return -int(d)

    def transition_distribution(self, c, d, u):
        return [-int(d)], np.array([1.0])

    def transition_matrix(self, c, d, u):
        d = np.asarray(d)
        out = np.zeros((d.size, 2))
        out[np.arange(d.size), np.where(d > 0, 0, 1)] = 1.0
        return out


def elementary_characteristics(K=1, u_max=1.0):
    return ElementaryModel(K, u_max)


class ConstantRateModel(LocalCharacteristics):
    """Jump rate fixed at ``rate_value``, no reaction, d alternating in {0, 1}."""

    discrete_states = (0, 1)

    def __init__(self, rate_value=1.0, K=1, u_max=1.0):
        if rate_value <= 0:
            raise ValueError("rate must be positive")
        self.rate_value = float(rate_value)
        self.K = int(K)
        self.u_min, self.u_max = -float(u_max), float(u_max)
        self.diffusivity = 1.0
        self.reaction = ZERO_REACTION
        self.delta = self.m_lambda = self.rate_value

    def rate(self, c, d, u):
        return np.full(np.asarray(c).shape[0], self.rate_value)

    def sample_transition(self, c, d, u, rng):
        return 1 - int(d)

    def transition_distribution(self, c, d, u):
        return [1 - int(d)], np.array([1.0])

    def transition_matrix(self, c, d, u):
        d = np.asarray(d)
        out = np.zeros((d.size, 2))
        out[np.arange(d.size), 1 - d] = 1.0
        return out


def build_model(spec):
    """Model from a plain dict block (see the CLI config)."""
    spec = dict(spec)
    kind = spec.pop("model")
    if kind == "elementary":
        return ElementaryModel(spec.get("K", 1), spec.get("u_max", 1.0))
    if kind == "constant-rate":
        return ConstantRateModel(spec.get("rate", 1.0), spec.get("K", 1), spec.get("u_max", 1.0))
    if kind == "hh-chr2":
        params = HHParams(**(spec.get("params") or {}))
        return HHChR2Model(spec.get("N", 10), spec.get("K", 64), params,
                           spec.get("chr2_variant", "four-state"), spec.get("site_map"),
                           spec.get("h_transitions", True), spec.get("rate_floor", RATE_FLOOR))
    raise ValueError(f"unknown model {kind!r}")
