import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from pdmpctl.flow import (FlowBlowupError, ReactionTerm, RelaxedRule, SpectralField,
                          ZERO_REACTION, bump_normalization, field_pairing, flow_exact_elementary,
                          flow_integrate, lawson_step, mode_rates, mollifier_build,
                          mollifier_matrix, norms, semigroup_apply, time_grid)
from pdmpctl.models import ElementaryModel

finite = st.floats(-10, 10, allow_nan=False)
coeff_lists = st.lists(finite, min_size=1, max_size=6)


# ------------------------------------------------------------ fields

def test_field_rejects_bad_input():
    with pytest.raises(ValueError):
        SpectralField([])
    with pytest.raises(ValueError):
        SpectralField([1.0, np.nan])
    with pytest.raises(ValueError):
        SpectralField([np.inf])


def test_field_vanishes_on_boundary_and_matches_basis():
    v = SpectralField([0.3, -1.2, 0.7])
    assert np.allclose(v([0.0, 1.0]), 0.0, atol=1e-15)
    x = 0.37
    want = sum(c * np.sqrt(2) * np.sin((k + 1) * np.pi * x) for k, c in enumerate(v.coeffs))
    assert v(x)[0] == pytest.approx(want, abs=1e-14)


def test_h_norm_equals_l2_norm_of_function():
    v = SpectralField([0.5, -0.25, 1.0])
    l2 = np.sqrt(quad(lambda x: v(x)[0] ** 2, 0, 1, limit=200)[0])
    assert v.h_norm() == pytest.approx(l2, rel=1e-10)


def test_v_norm_adds_gradient_energy():
    v = SpectralField([0.5, -0.25])
    grad = quad(lambda x: (0.5 * np.sqrt(2) * np.pi * np.cos(np.pi * x)
                           - 0.25 * np.sqrt(2) * 2 * np.pi * np.cos(2 * np.pi * x)) ** 2, 0, 1)[0]
    assert v.v_norm() ** 2 == pytest.approx(v.h_norm() ** 2 + grad, rel=1e-10)
    assert norms(np.array([v.coeffs]), "V")[0] == pytest.approx(v.v_norm())
    with pytest.raises(ValueError):
        v.norm("L3")


@given(coeff_lists, coeff_lists)
def test_field_arithmetic_is_coefficientwise(a, b):
    n = min(len(a), len(b))
    u, w = SpectralField(a[:n]), SpectralField(b[:n])
    assert np.allclose((u + w).coeffs, np.add(a[:n], b[:n]))
    assert (u + w).h_norm() <= u.h_norm() + w.h_norm() + 1e-9
    assert np.allclose((2.0 * u).coeffs, 2.0 * np.asarray(a[:n]))


# --------------------------------------------------------- semigroup

def test_semigroup_examples():
    # frozen from math.exp(-pi**2 * t * k**2)
    assert semigroup_apply(SpectralField([1.0]), 0.1).coeffs[0] == pytest.approx(0.3727078, abs=1e-7)
    out = semigroup_apply(SpectralField([0.0, 1.0]), 0.05).coeffs
    assert out[0] == 0.0 and out[1] == pytest.approx(0.1389111, abs=1e-7)
    v = SpectralField([1.0, 2.0, 3.0])
    assert np.array_equal(semigroup_apply(v, 0.0).coeffs, v.coeffs)
    with pytest.raises(ValueError):
        semigroup_apply(v, -1e-3)


@given(coeff_lists, st.floats(0, 0.5), st.floats(0, 0.5))
def test_semigroup_property_and_contraction(c, s, t):
    v = SpectralField(c)
    two = semigroup_apply(semigroup_apply(v, s), t).coeffs
    one = semigroup_apply(v, s + t).coeffs
    assert np.allclose(two, one, rtol=1e-12, atol=1e-300)
    assert semigroup_apply(v, t).h_norm() <= v.h_norm() + 1e-12


# --------------------------------------------------------- mollifiers

def test_bump_normalization_constant():
    mass = quad(lambda x: np.exp(1.0 / (x * x - 1.0)), -1, 1)[0]
    assert 1.0 / bump_normalization() == pytest.approx(mass, rel=1e-10)
    assert mass == pytest.approx(0.4439938, abs=1e-7)
    assert bump_normalization() == pytest.approx(2.25228, abs=1e-5)


@pytest.mark.parametrize("N,i", [(2, 1), (10, 3), (64, 40)])
def test_mollifier_mass_and_support(N, i):
    m = mollifier_build(i / N, N, 8)
    assert abs(m.mass() - 1.0) <= 1e-8
    lo, hi = m.support
    assert lo == pytest.approx(i / N - 0.5 / N) and hi == pytest.approx(i / N + 0.5 / N)
    assert m.density(lo - 1e-9) == 0.0 and m.density(hi + 1e-9) == 0.0
    assert np.all(np.abs(m.sine_coeffs) <= np.sqrt(2) + 1e-12)


def test_mollifier_domain_errors():
    with pytest.raises(ValueError):
        mollifier_build(0.0, 4, 4)
    with pytest.raises(ValueError):
        mollifier_build(1.0, 4, 4)
    with pytest.raises(ValueError):
        mollifier_build(0.3, 4, 4)


def test_mollifier_coefficients_match_direct_projection():
    m = mollifier_build(0.25, 4, 3)
    for k in range(1, 4):
        direct = quad(lambda x: m.density(x) * np.sqrt(2) * np.sin(k * np.pi * x),
                      *m.support, limit=200)[0]
        assert m.sine_coeffs[k - 1] == pytest.approx(direct, abs=1e-10)
    assert np.array_equal(mollifier_matrix(4, 3)[0], m.sine_coeffs)


def test_mollifier_tends_to_point_evaluation():
    errs = []
    for N in (4, 16, 64):
        m = mollifier_build(0.5, N, 3)
        errs.append(abs(m.sine_coeffs[0] - np.sqrt(2) * np.sin(np.pi * 0.5)))
    assert errs[0] > errs[1] > errs[2]


def test_pairing_examples():
    m = mollifier_build(0.5, 64, 4)
    assert field_pairing(SpectralField.zeros(4), m) == 0.0
    assert field_pairing(SpectralField.mode(1, 4), m) == pytest.approx(np.sqrt(2), abs=1e-3)
    a, b = SpectralField([1.0, 2, 3, 4]), SpectralField([0.5, -1, 0, 2])
    assert field_pairing(a + b, m) == pytest.approx(field_pairing(a, m) + field_pairing(b, m))
    with pytest.raises(ValueError):
        field_pairing(SpectralField([1.0, 2.0]), m)


# ------------------------------------------------------------ rules

def test_rule_validation():
    with pytest.raises(ValueError):
        RelaxedRule([0.0, 1.0], [0.0, 1.0], [[0.5, 0.6]])
    with pytest.raises(ValueError):
        RelaxedRule([0.0, 1.0], [0.0, 1.0], [[1.5, -0.5]])
    with pytest.raises(ValueError):
        RelaxedRule([0.1, 1.0], [0.0], [[1.0]])
    with pytest.raises(ValueError):
        RelaxedRule([0.0, 0.6, 0.4], [0.0], [[1.0], [1.0]])


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=4), st.floats(0.1, 3.0))
def test_rule_barycenter_and_scaling(raw, horizon):
    w = np.asarray(raw) / np.sum(raw)
    atoms = np.linspace(-1, 1, w.size)
    rule = RelaxedRule.mixture(atoms, w, 1.0)
    assert rule.barycenters()[0] == pytest.approx(w @ atoms)
    scaled = rule.scaled(horizon)
    assert scaled.horizon == pytest.approx(horizon)
    assert scaled.integrated_barycenter(horizon) == pytest.approx(horizon * (w @ atoms))
    back = RelaxedRule.from_dict(rule.to_dict())
    assert back.encoding() == rule.encoding()


def test_ordinary_rule_and_shift():
    rule = RelaxedRule.ordinary([0.0, 0.3, 1.0], [1.0, -0.5])
    assert rule.is_ordinary()
    assert rule.control_at(0.1) == 1.0 and rule.control_at(0.5) == -0.5
    tail = rule.shifted(0.5)
    assert tail.horizon == pytest.approx(0.5) and tail.n_segments == 1
    assert tail.control_at(0.0) == -0.5
    assert not RelaxedRule.mixture([0, 1], [0.5, 0.5], 1.0).is_ordinary()


def test_time_grid_contains_breaks():
    g = time_grid(1.0, 0.3, [0.45])
    assert g[0] == 0.0 and g[-1] == 1.0
    assert 0.45 in g and np.all(np.diff(g) > 0)
    assert np.array_equal(time_grid(0.0, 0.1), [0.0])


@given(st.floats(1e-300, 1.0))
def test_time_grid_keeps_both_endpoints(horizon):
    g = time_grid(horizon, 1e-2)
    assert g[0] == 0.0 and g[-1] == horizon and g.size >= 2
    assert np.all(np.diff(g) > 0)


# --------------------------------------------------------- integration

def test_zero_reaction_matches_semigroup():
    v0 = SpectralField([1.0, -0.5, 0.25])
    rule = RelaxedRule.constant(0.0, 0.2)
    tr = flow_integrate(v0, 0, rule, 0.2, 0.01, ZERO_REACTION)
    for t, c in zip(tr.times, tr.coeffs):
        assert np.allclose(c, semigroup_apply(v0, t).coeffs, rtol=1e-13)


def test_elementary_example_amplitude():
    m = ElementaryModel(K=1)
    rule = RelaxedRule.constant(0.0, 0.1)
    ex = flow_exact_elementary(SpectralField([1.0]), 1, rule, 0.1).coeffs[0]
    # frozen from math.exp((1 - pi**2) * 0.1)
    assert ex == pytest.approx(0.4119059, abs=1e-7)
    num = flow_integrate(SpectralField([1.0]), 1, rule, 0.1, 1e-4, m.reaction).coeffs[-1, 0]
    assert num == pytest.approx(ex, rel=1e-10)
    cancel = flow_exact_elementary(SpectralField([1.0, 1.0]), -1, RelaxedRule.constant(1.0, 1.0), 0.3)
    assert np.allclose(cancel.coeffs, np.exp(-mode_rates(2) * 0.3), rtol=1e-14)


def test_euler_is_first_order_and_rk4_fourth():
    m = ElementaryModel(K=2)
    v0 = SpectralField([1.0, 0.5])
    rule = RelaxedRule.constant(0.5, 1.0)
    ex = flow_exact_elementary(v0, 1, rule, 1.0).coeffs
    err = {}
    for scheme in ("euler", "rk4"):
        err[scheme] = [np.linalg.norm(flow_integrate(v0, 1, rule, 1.0, dt, m.reaction,
                                                     scheme=scheme).coeffs[-1] - ex)
                       for dt in (1e-2, 5e-3)]
    assert err["euler"][0] / err["euler"][1] == pytest.approx(2.0, rel=0.1)
    assert err["rk4"][0] / err["rk4"][1] == pytest.approx(16.0, rel=0.15)


def test_flow_property_with_shifted_rule():
    m = ElementaryModel(K=3)
    v0 = SpectralField([0.8, -0.2, 0.1])
    rule = RelaxedRule([0.0, 0.35, 1.0], [-1.0, 1.0], [[0.2, 0.8], [1.0, 0.0]])
    dt = 1e-3
    whole = flow_integrate(v0, -1, rule, 0.9, dt, m.reaction).coeffs[-1]
    first = flow_integrate(v0, -1, rule, 0.5, dt, m.reaction).final()
    second = flow_integrate(first, -1, rule.shifted(0.5), 0.4, dt, m.reaction).coeffs[-1]
    ex = flow_exact_elementary(v0, -1, rule, 0.9).coeffs
    assert np.linalg.norm(whole - second) <= 2 * max(np.linalg.norm(whole - ex), 1e-13)


def test_hazard_is_trapezoid_of_rate():
    m = ElementaryModel(K=1)
    rule = RelaxedRule.constant(0.5, 0.3)
    tr = flow_integrate(SpectralField([0.7]), 1, rule, 0.3, 0.01, m.reaction, m.rate)
    lam = m.rate(tr.coeffs, np.ones(tr.times.size), np.full(tr.times.size, 0.5))
    assert tr.hazard[-1] == pytest.approx(np.trapezoid(lam, tr.times), rel=1e-13)


def test_gronwall_bound_on_samples():
    m = ElementaryModel(K=3)
    v0 = SpectralField([1.0, -1.0, 0.5])
    T = 2.0
    tr = flow_integrate(v0, 1, RelaxedRule.constant(1.0, T), T, 1e-3, m.reaction)
    bound = (v0.h_norm() + m.reaction.b1 * T) * np.exp(m.reaction.b2 * T)
    assert np.all(norms(tr.coeffs) <= bound)


def test_control_continuity_via_exact_formula():
    v0 = SpectralField([1.0])
    eps, T = 1e-3, 1.0
    a = flow_exact_elementary(v0, 1, RelaxedRule.constant(0.2, T), T).h_norm()
    b = flow_exact_elementary(v0, 1, RelaxedRule.constant(0.2 + eps, T), T).h_norm()
    assert abs(a - b) <= np.exp((2.0 + eps) * T) * eps * T


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_names_failure_time():
    explode = ReactionTerm(lambda c, d, u: 1e3 * c ** 3, 1.0, 0.0, 1.0)
    with pytest.raises(FlowBlowupError) as info:
        flow_integrate(SpectralField([10.0]), 0, RelaxedRule.constant(0.0, 1.0), 1.0, 1e-2, explode)
    assert 0.0 < info.value.time <= 1.0


def test_reaction_growth_check_and_shape():
    m = ElementaryModel(K=2, u_max=1.0)
    rng = np.random.default_rng(0)
    samples = [(rng.normal(size=2), int(rng.choice([-1, 1])), rng.uniform(-1, 1)) for _ in range(50)]
    assert m.reaction.growth_ok(samples)
    assert m.reaction(SpectralField([1.0, 2.0]), 1, 0.5).K == 2
    out = lawson_step(m.reaction, np.ones((3, 2)), np.ones(3), np.zeros((3, 1)), np.ones((3, 1)),
                      np.array([0.1, 0.2, 0.0]), mode_rates(2))
    assert np.allclose(out[2], 1.0)
