"""Property suites run by ``pdmpctl verify``; each reports pass/fail and a margin."""

import numpy as np
from scipy import stats

from ..flow import (RelaxedRule, SpectralField, flow_exact_elementary, flow_integrate,
                    semigroup_apply)
from ..mdp import (Reference, ValueGrid, barycenter_rule, bellman_R, bounding_build,
                   build_stage_operator, equivalence_verdict, kernel_expectation,
                   mdp_chain_cost, monte_carlo_cost, node_weights, rule_family,
                   tracking_cost, value_iteration)
from ..models import (SERIES_CUTOFF, ConstantRateModel, ElementaryModel, HHChR2Model,
                      gating_rates, x_over_expm1)
from ..pdmp import (ConstantStrategy, UpsilonPoint, run_ensemble, sample_jump_time,
                    survival, trajectory_rngs)

# Rate functions of the individual channel transitions, written out once more
# independently of the edge table used by the model.
TABLE_RATES = {
    ("n0", "n1"): lambda g, u, p: 4 * g.alpha_n, ("n1", "n2"): lambda g, u, p: 3 * g.alpha_n,
    ("n2", "n3"): lambda g, u, p: 2 * g.alpha_n, ("n3", "n4"): lambda g, u, p: g.alpha_n,
    ("n1", "n0"): lambda g, u, p: g.beta_n, ("n2", "n1"): lambda g, u, p: 2 * g.beta_n,
    ("n3", "n2"): lambda g, u, p: 3 * g.beta_n, ("n4", "n3"): lambda g, u, p: 4 * g.beta_n,
    ("m0h1", "m1h1"): lambda g, u, p: 3 * g.alpha_m, ("m1h1", "m2h1"): lambda g, u, p: 2 * g.alpha_m,
    ("m2h1", "m3h1"): lambda g, u, p: g.alpha_m, ("m1h1", "m0h1"): lambda g, u, p: g.beta_m,
    ("m2h1", "m1h1"): lambda g, u, p: 2 * g.beta_m, ("m3h1", "m2h1"): lambda g, u, p: 3 * g.beta_m,
    ("m0h0", "m1h0"): lambda g, u, p: 3 * g.alpha_m, ("m1h0", "m2h0"): lambda g, u, p: 2 * g.alpha_m,
    ("m2h0", "m3h0"): lambda g, u, p: g.alpha_m, ("m1h0", "m0h0"): lambda g, u, p: g.beta_m,
    ("m2h0", "m1h0"): lambda g, u, p: 2 * g.beta_m, ("m3h0", "m2h0"): lambda g, u, p: 3 * g.beta_m,
    ("c1", "o1"): lambda g, u, p: p.eps1 * u, ("o1", "c1"): lambda g, u, p: p.K_d1,
    ("o1", "o2"): lambda g, u, p: p.e12, ("o2", "o1"): lambda g, u, p: p.e21,
    ("o2", "c2"): lambda g, u, p: p.K_d2, ("c2", "o2"): lambda g, u, p: p.eps2 * u,
    ("c2", "c1"): lambda g, u, p: p.K_r,
}


def _result(name, ok, measured, threshold, **detail):
    return {"name": name, "pass": bool(ok), "measured": float(measured),
            "threshold": float(threshold), **detail}


def suite_flow_exactness(seed):
    m = ElementaryModel(K=4)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(3):
        v0 = SpectralField(rng.uniform(-1, 1, 4))
        rule = RelaxedRule([0, 0.4, 1.0], [-1.0, 0.0, 1.0], rng.dirichlet(np.ones(3), 2))
        for d in (-1, 1):
            num = flow_integrate(v0, d, rule, 1.0, 1e-4, m.reaction).coeffs[-1]
            ex = flow_exact_elementary(v0, d, rule, 1.0).coeffs
            worst = max(worst, np.linalg.norm(num - ex) / np.linalg.norm(ex))
    return _result("flow_exactness", worst <= 1e-6, worst, 1e-6)


def suite_semigroup(seed):
    K = 16
    worst = 0.0
    for t in (0.01, 0.1):
        out = semigroup_apply(SpectralField(np.ones(K)), t).coeffs
        k = np.arange(1, K + 1)
        worst = max(worst, np.max(np.abs(out / np.exp(-(k * np.pi) ** 2 * t) - 1.0)))
    return _result("semigroup_decay", worst <= 1e-13, worst, 1e-13)


def suite_singularities(seed):
    an, am = gating_rates(10.0).alpha_n, gating_rates(25.0).alpha_m
    jump = singularity_continuity()
    ok = an == 0.1 and am == 1.0 and jump <= 1e-10
    return _result("removable_singularities", ok, jump, 1e-10, alpha_n_10=an, alpha_m_25=am)


def singularity_continuity():
    """Largest gap between neighbouring arguments around the series branch.

    Compares values at arguments 1e-9 mV away from the singular points and
    the two branches of x/(e^x - 1) on either side of the switch.
    """
    near = np.array([-1e-9, 1e-9])
    gap = max(np.max(np.abs(gating_rates(10.0 + near).alpha_n - 0.1)),
              np.max(np.abs(gating_rates(25.0 + near).alpha_m - 1.0)))
    for x in (-SERIES_CUTOFF, SERIES_CUTOFF):
        inside = x_over_expm1(np.nextafter(x, 0.0))
        outside = x_over_expm1(np.nextafter(x, 2 * x))
        gap = max(gap, abs(inside - outside))
    return float(gap)


def suite_rate_table(seed):
    model = HHChR2Model(N=4, K=8, h_transitions=True)
    p = model.params
    worst, missing = 0.0, []
    for v in (-12.0, 0.0, 10.0, 25.0, 60.0, 115.0):
        g = gating_rates(v)
        for u in (0.0, 0.5 * p.u_max, p.u_max):
            basis = model._basis(np.array([[v]]), np.array([u]))[0, 0]
            for (a, b), f in TABLE_RATES.items():
                ids = [k for k, e in enumerate(model.edges)
                       if e[0] == model.code[a] and e[1] == model.code[b]]
                if len(ids) != 1:
                    missing.append(f"{a}->{b}")
                    continue
                e = model.edges[ids[0]]
                got = e[3] * basis[e[2]]
                want = max(f(g, u, p), model.rate_floor)
                worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    extra = sorted({f"{model.state_names[e[0]]}->{model.state_names[e[1]]}" for e in model.edges}
                   - {f"{a}->{b}" for a, b in TABLE_RATES})
    return _result("rate_table", worst <= 1e-12 and not missing, worst, 1e-12,
                   missing=sorted(set(missing)), extra_edges=extra)


def _random_points(rng, n, T):
    out = []
    for _ in range(n):
        z = UpsilonPoint(rng.uniform(-1, 1, 1), int(rng.choice([-1, 1])), rng.uniform(0, T))
        n_t = int(rng.integers(1, 4))
        rule = RelaxedRule(np.linspace(0, T - z.h, n_t + 1), [-1.0, 0.0, 1.0],
                           rng.dirichlet(np.ones(3), n_t))
        out.append((z, rule))
    return out


def suite_survival_identity(seed, T=1.0):
    m = ElementaryModel(K=1)
    rng = np.random.default_rng(seed)
    worst = 0.0
    one = lambda c, d, h: np.ones(len(h))
    for z, rule in _random_points(rng, 100, T):
        q1 = kernel_expectation(m, one, z, rule, T, T / 100)
        chi = survival(m, z, rule, T - z.h, T / 100)
        worst = max(worst, abs(q1 + chi - 1.0))
    return _result("survival_identity", worst <= 1e-6, worst, 1e-6)


def suite_survival_bounds(seed, T=1.0):
    m = ElementaryModel(K=1)
    rng = np.random.default_rng(seed + 1)
    worst = -np.inf
    for z, rule in _random_points(rng, 20, T):
        for frac in (0.25, 0.5, 1.0):
            t = frac * (T - z.h)
            chi = survival(m, z, rule, t, T / 200)
            worst = max(worst, np.exp(-m.m_lambda * t) - chi, chi - np.exp(-m.delta * t))
    return _result("survival_bounds", worst <= 1e-12, worst, 1e-12)


def suite_jump_law(seed, n=4000, rate=1.5, T=1.0):
    m = ConstantRateModel(rate)
    z = UpsilonPoint([0.0], 0, 0.0)
    rngs = trajectory_rngs(seed, 0, n, stream=7)
    from ..pdmp import FunctionStrategy
    rule = RelaxedRule.constant(0.0, T)
    res = run_ensemble(m, FunctionStrategy(T, lambda _: rule), [z] * n, rngs, T, 1e-2,
                       first_jump_only=True)
    times = res.first_jump[~np.isnan(res.first_jump)]
    norm = 1.0 - np.exp(-rate * T)
    ks = stats.kstest(times, lambda t: (1.0 - np.exp(-rate * t)) / norm).statistic
    crit = 1.63 / np.sqrt(times.size)
    return _result("jump_law_ks", ks < crit, ks, crit, n_jumped=int(times.size))


def suite_no_self_jump(seed):
    model = HHChR2Model(N=6, K=16)
    rng = np.random.default_rng(seed)
    d = model.rest_config().states
    c = rng.normal(0, 5, model.K)
    same = 0
    for _ in range(500):
        new = model.sample_transition(c, d, 0.5, rng)
        same += int(np.array_equal(new, d))
        d = new
    return _result("no_self_jump", same == 0, same, 0)


def suite_hh_rate_bounds(seed):
    model = HHChR2Model(N=6, K=16)
    rng = np.random.default_rng(seed)
    B = 2000
    c = rng.normal(0, 40, (B, model.K))
    d = np.array([[rng.choice(a) for a in model.site_alphabet] for _ in range(B)])
    u = rng.uniform(0, model.u_max, B)
    lam = model.rate(c, d, u)
    margin = min(lam.min() - model.delta, model.m_lambda - lam.max())
    return _result("hh_rate_bounds", margin >= -1e-12, margin, 0.0)


def suite_voltage(seed, n=8, T=2.0):
    model = HHChR2Model(N=4, K=16)
    z = UpsilonPoint(np.zeros(model.K), model.rest_config().states, 0.0)
    from ..flow import sine_basis
    basis = sine_basis(np.linspace(0, 1, 101), model.K)
    ext = [np.inf, -np.inf]

    def obs(rows, t, c, d):
        v = c @ basis.T
        ext[0], ext[1] = min(ext[0], v.min()), max(ext[1], v.max())

    for u in (0.0, model.u_max):
        run_ensemble(model, ConstantStrategy(T, u), [z] * n, trajectory_rngs(seed, 0, n), T,
                     2e-3, observer=obs)
    margin = min(ext[0] - (model.v_minus - 0.5), (model.v_plus + 0.5) - ext[1])
    return _result("voltage_invariance", margin >= 0, margin, 0.0, v_min=ext[0], v_max=ext[1])


def _small_problem(kappa=1000.0, T=1.0):
    m = ElementaryModel(K=1)
    cost = tracking_cost(kappa, Reference([0.5]))
    bounding = bounding_build(m, cost, 1.0, T)
    grid = ValueGrid.uniform(1, 1.0, 11, m.discrete_states, T, 6)
    family = rule_family([-1.0, 0.0, 1.0], (1,), 4)
    return m, cost, bounding, grid, family


def suite_contraction(seed, T=1.0):
    m, cost, bounding, grid, family = _small_problem(T=T)
    op = build_stage_operator(m, cost, grid, family, T, T / 50)
    wts = node_weights(grid, bounding)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(100):
        scale = wts if k % 2 else np.full_like(wts, 10.0)
        w1, w2 = rng.uniform(-1, 1, (2, wts.size)) * scale
        num = np.max(np.abs(op.T(w1)[0] - op.T(w2)[0]) / wts)
        den = np.max(np.abs(w1 - w2) / wts)
        worst = max(worst, num / den)
    res = value_iteration(m, cost, bounding, grid, family, T, T / 50, operator=op)
    vi_ratio = max(res.ratios[1:], default=0.0)
    ok = worst <= bounding.C and vi_ratio <= bounding.C
    return _result("contraction", ok, max(worst, vi_ratio), bounding.C,
                   operator_ratio=worst, vi_ratio=vi_ratio)


def suite_barycenter(seed, T=1.0):
    m, cost, bounding, grid, family = _small_problem(T=T)
    dt = T / 50
    res = value_iteration(m, cost, bounding, grid, family, T, dt)
    coeffs, d_idx, h = grid.nodes()
    worst = -np.inf
    for n in range(grid.n_nodes):
        z = UpsilonPoint(coeffs[n], grid.d_values[d_idx[n]], h[n])
        rule = family[res.choice[n]].rule(T - h[n])
        bar = barycenter_rule(rule, (m.u_min, m.u_max))
        gap = bellman_R(m, cost, res.table, z, bar, T, dt) - bellman_R(m, cost, res.table, z, rule, T, dt)
        worst = max(worst, gap)
    return _result("barycenter_dominance", worst <= 1e-9, worst, 1e-9)


def suite_equivalence(seed, n=2000, T=1.0):
    m = ElementaryModel(K=1)
    cost = tracking_cost(10.0, Reference([0.5]))
    z0 = UpsilonPoint([0.5], 1, 0.0)
    strat = ConstantStrategy(T, atoms=[-1.0, 1.0], weights=[0.5, 0.5])
    v = monte_carlo_cost(m, cost, strat, z0, n, seed, T, 2e-3)
    j = mdp_chain_cost(m, cost, strat, z0, n, seed, T, 2e-3)
    verdict = equivalence_verdict(v, j)
    return _result("equivalence", verdict["pass"], verdict["gap"], verdict["bound"],
                   V=verdict["V"], J=verdict["J"])


SUITES = [suite_flow_exactness, suite_semigroup, suite_singularities, suite_rate_table,
          suite_survival_identity, suite_survival_bounds, suite_jump_law, suite_no_self_jump,
          suite_hh_rate_bounds, suite_voltage, suite_contraction, suite_barycenter,
          suite_equivalence]


def run_suites(seed=0, suites=None):
    results = []
    for suite in suites or SUITES:
        try:
            results.append(suite(seed))
        except Exception as exc:  # failures are report content
            results.append({"name": suite.__name__.replace("suite_", ""), "pass": False,
                            "error": f"{type(exc).__name__}: {exc}"})
    return results
