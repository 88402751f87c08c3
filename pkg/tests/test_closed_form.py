import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entropic_liquidation import closed_form as cf
from entropic_liquidation import illustration_params
from entropic_liquidation.errors import DegenerateRegime, OutOfRange
from entropic_liquidation.hjb import integrate_riccati


def raw_hyperbolic(p, t):
    """a, a - gamma, b and ell straight from the sinh/cosh expressions."""
    s = math.sqrt(p.rho)
    g, beta = p.gamma, p.beta
    z = g * s / (2 * (p.eta + p.lambda1)) * (p.T - np.asarray(t, dtype=float))
    sh, ch = np.sinh(z), np.cosh(z)
    chm1 = 2 * np.sinh(z / 2) ** 2  # cosh - 1 without cancellation
    D = (2 * beta * (1 - p.rho) - g) * sh + g * s * ch
    a = -g * s * (2 * beta * s * sh + (2 * beta - g) * ch) / D
    a_mg = -g * ((2 * beta - g) * sh + 2 * beta * s * ch) / D
    b = 2 * p.lambda1 * p.v_bar * ((2 * beta - g) * sh + 2 * beta * s * chm1) / D
    ell = (2 * p.lambda1 * p.v_bar / (g * s)) * (
        (2 * beta * chm1 + (2 * beta - g) / s * sh) / (2 * beta * sh + (2 * beta - g) / s * ch)
    )
    return a, a_mg, b, ell


def rel(x, y):
    x, y = np.asarray(x), np.asarray(y)
    return float(np.max(np.abs(x - y)) / max(np.max(np.abs(y)), 1e-300))


def test_terminal_conditions(rho_params):
    p = rho_params
    c = cf.eval_coefficients(p, p.T)
    assert c.a == -2 * p.beta + p.gamma
    assert c.b == 0.0 and c.c == 0.0 and c.ell == 0.0
    assert cf.value_function(p, p.T, 3e5) == -p.beta * 3e5**2
    assert cf.value_function(p, p.T, 0.0) == 0.0


@pytest.mark.parametrize("t", [-1e-9, 5.0 + 1e-9, float("nan")])
def test_out_of_range(t):
    with pytest.raises(OutOfRange):
        cf.eval_coefficients(illustration_params(rho=0.5), t)


@pytest.mark.parametrize("rho", [0.0, 0.5])
def test_matches_rk4(rho):
    p = illustration_params(rho=rho)
    sol = integrate_riccati(p, 100_000)
    idx = [0, 50_000, 100_000]
    g = cf.coefficient_grid(p, sol.t[idx])
    for name in ("a", "b", "c"):
        got, ref = getattr(g, name), getattr(sol, name)[idx]
        assert rel(got, ref) < 1e-8, name


@pytest.mark.parametrize("rho", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("T", [5.0, 5e3, 5e4])
def test_cross_form_agreement(rho, T):
    p = illustration_params(rho=rho, T=T)
    t = np.linspace(0, T, 257)
    a, a_mg, b, ell = raw_hyperbolic(p, t)
    g = cf.coefficient_grid(p, t)
    assert rel(g.a, a) < 1e-12
    assert rel(g.a_minus_gamma, a_mg) < 1e-12
    assert rel(g.b, b) < 1e-12
    assert rel(g.ell[:-1], ell[:-1]) < 1e-12


def test_overflow_safe():
    p = illustration_params(rho=0.9)
    omega = p.derived.rate_arg
    p = illustration_params(rho=0.9, T=1e4 / omega)
    g = cf.coefficient_grid(p, np.linspace(0, p.T, 11))
    for v in (g.a, g.b, g.c, g.a_minus_gamma, g.ell):
        assert np.all(np.isfinite(v))
    # deep in the early stage the schedule has converged to its plateau
    ell_inf, a_inf, _, _ = cf.early_stage(p)
    assert g.a[0] == pytest.approx(a_inf, rel=1e-12)
    assert g.ell[0] == pytest.approx(ell_inf, rel=1e-12)


def test_risk_neutral_schedule_linear(base):
    t = np.linspace(0, base.T, 101)
    g = cf.coefficient_grid(base, t)
    np.testing.assert_allclose(g.ell, base.derived.v_bar_ell * (base.T - t), rtol=1e-14, atol=1e-12)


def test_m_zero_uses_risk_neutral_limit(base):
    p = base.replace(m=0.0, lambda2=5.0)
    t = np.linspace(0, p.T, 11)
    assert np.allclose(cf.coefficient_grid(p, t).a, cf.coefficient_grid(base, t).a, rtol=1e-15)


def test_risk_neutral_minus_a(base):
    t = np.linspace(0, base.T, 101)
    exact = -cf.coefficient_grid(base, t).a
    np.testing.assert_allclose(exact, cf.risk_neutral_minus_a(base, t), rtol=1e-13)
    # the alternative expression is off by exactly a factor two
    np.testing.assert_allclose(cf.risk_neutral_minus_a_half(base, t), exact / 2, rtol=1e-13)


def test_small_lambda2_converges_to_risk_neutral(base):
    t = np.linspace(0, base.T, 101)
    ref = cf.risk_neutral_minus_a(base, t)
    gaps = [rel(-cf.coefficient_grid(base.with_rho(r), t).a, ref) for r in (1e-4, 1e-6, 1e-8, 1e-10)]
    # sup-norm gap vanishes linearly in lambda2
    for g0, g1 in zip(gaps, gaps[1:]):
        assert g0 / g1 == pytest.approx(100, rel=1e-3)
    assert gaps[-1] < 1e-10


def test_small_lambda2_schedule_slope(base):
    tau = base.T
    vbl = base.derived.v_bar_ell

    def dev(rho):
        return cf.eval_coefficients(base.with_rho(rho), 0.0).ell / tau - vbl

    d3, d6 = dev(1e-3), dev(1e-6)
    assert abs(d6) < 1e-6 * vbl
    # deviation is linear in lambda2
    assert d3 / d6 == pytest.approx(1e3, rel=1e-2)


def test_signs_and_anchor(rho_params):
    p = rho_params
    t = np.linspace(0, p.T, 201)
    g = cf.coefficient_grid(p, t)
    assert np.all(g.a < 0) and np.all(g.a_minus_gamma < 0)
    assert np.all(g.ell >= 0)
    np.testing.assert_allclose(g.ell[:-1], -g.b[:-1] / g.a[:-1], rtol=1e-12)
    vbl = p.derived.v_bar_ell
    for tk, ell in zip(t[::20], g.ell[::20]):
        assert cf.optimal_rate(p, tk, ell) == pytest.approx(vbl, rel=1e-12)


def test_a_minus_gamma_direct(rho_params):
    p = rho_params
    g = cf.coefficient_grid(p, np.linspace(0, p.T, 51))
    np.testing.assert_allclose(g.a_minus_gamma, g.a - p.gamma, rtol=1e-12)


def test_minus_a_monotone(base):
    t = np.linspace(0, base.T, 501)
    rows = [-cf.coefficient_grid(base.with_rho(r), t).a for r in (0.0, 0.1, 0.5, 0.9)]
    for r in rows:
        assert np.all(np.diff(r) >= 0)
    for lo, hi in zip(rows, rows[1:]):
        assert np.all(hi >= lo)


def test_rate_forms_agree():
    p = illustration_params(rho=0.5)
    c = cf.eval_coefficients(p, 0.0)
    x = 1e6
    direct = -(c.a * x + c.b - 2 * p.lambda1 * p.v_bar) / (2 * (p.eta + p.lambda1))
    mr = p.derived.v_bar_ell - c.a * (x - c.ell) / (2 * (p.eta + p.lambda1))
    assert cf.optimal_rate(p, 0.0, x) == pytest.approx(direct, rel=1e-12)
    assert cf.optimal_rate_mean_reverting(p, 0.0, x) == pytest.approx(mr, rel=1e-15)
    assert direct == pytest.approx(mr, rel=1e-12)


def test_terminal_rate_without_penalty(base):
    p = base.replace(lambda1=0.0)
    x = 2.5e5
    assert cf.optimal_rate(p, p.T, x) == pytest.approx((2 * p.beta - p.gamma) * x / (2 * p.eta), rel=1e-14)


@pytest.mark.parametrize("t,x", [(0.0, 1e6), (2.5, -3e5), (5.0, 4e5)])
def test_backward_controls(t, x):
    p = illustration_params(rho=0.5)
    z = cf.backward_controls(p, t, x)
    assert z.z2_tilde == 0.0
    assert z.z2 == -p.sigma * x
    v = cf.optimal_rate(p, t, x)
    resid = z.z1_tilde - z.z1 - p.gamma * p.m * x - p.m * p.eta * v
    assert abs(resid) < 1e-9 * abs(z.z1_tilde)
    assert z.z2_tilde == pytest.approx(z.z2 + p.sigma * x, abs=0)


def test_backward_controls_vanish_without_fill_noise(base):
    z = cf.backward_controls(base.replace(m=0.0), 1.0, 7e5)
    assert z.z1_tilde == 0.0 and z.z1 == 0.0


def test_feedback_policy(base):
    p = base.with_rho(0.5)
    pol = cf.FeedbackPolicy(p)
    x = np.array([-1e6, 0.0, 1e6])
    np.testing.assert_allclose(pol.rate(1.0, x), [cf.optimal_rate(p, 1.0, xi) for xi in x], rtol=1e-13)
    np.testing.assert_allclose(pol.rate(1.0, x), pol.rate_mean_reverting(1.0, x), rtol=1e-12)
    np.testing.assert_allclose(pol.z1_tilde(1.0, x), [cf.backward_controls(p, 1.0, xi).z1_tilde for xi in x])
    assert pol.value(1.0, 1e6) == cf.value_function(p, 1.0, 1e6)


def test_value_concave(rho_params):
    p = rho_params
    x = np.linspace(-2e6, 2e6, 41)
    w = cf.value_function(p, 0.0, x)
    assert np.all(np.diff(w, 2) < 0)


def _horizon(p, z):
    return p.replace(T=z / p.derived.rate_arg)


@pytest.mark.parametrize("rho", [0.1, 0.5, 0.9])
def test_late_stage(rho):
    p = _horizon(illustration_params(rho=rho), 1e-3)
    ell0, a0, _ = cf.late_stage(p, 0.0)
    c = cf.eval_coefficients(p, 0.0)
    assert abs(ell0 / c.ell - 1) < 1e-3
    assert abs(a0 / c.a - 1) < 1e-3


def test_late_stage_variant_is_worse():
    p = _horizon(illustration_params(rho=0.9), 1e-3)
    _, a0, a0v = cf.late_stage(p, 0.0)
    a = cf.eval_coefficients(p, 0.0).a
    assert abs(a0v / a - 1) > abs(a0 / a - 1)


@pytest.mark.parametrize("rho", [0.1, 0.5, 0.9])
def test_early_stage(rho):
    p = _horizon(illustration_params(rho=rho), 20.0)
    reg = cf.asymptotics(p, 0.0)
    c = cf.eval_coefficients(p, 0.0)
    assert abs(reg.ell_inf / c.ell - 1) < 1e-3
    assert abs(reg.a_inf / c.a - 1) < 1e-3
    # the fixed point of v = v_bar_ell - a_inf (x - ell_inf) / (2 (eta + lambda1)) with v = 0
    h = p.eta + p.lambda1
    fixed = reg.ell_inf + 2 * h * p.derived.v_bar_ell / reg.a_inf
    assert reg.x_bar_inf == pytest.approx(fixed, rel=1e-12)
    assert reg.x_bar_inf == pytest.approx(2 * p.lambda1 * p.v_bar / p.gamma, rel=1e-12)
    assert cf.early_stage_ou_rate(p) == pytest.approx(-reg.a_inf / (2 * h))


def test_early_stage_degenerate(base):
    with pytest.raises(DegenerateRegime):
        cf.early_stage(base)
    with pytest.raises(DegenerateRegime):
        cf.asymptotics(base.replace(gamma=0.0).with_rho(0.5), 0.0)
    assert cf.asymptotics(base, 0.0, early=False).ell_inf is None


def test_derivatives_match_riccati_rhs(rho_params):
    from entropic_liquidation.hjb import riccati_rhs

    p = rho_params
    t = np.linspace(0, p.T, 101)
    g = cf.coefficient_grid(p, t)
    da, db, dc = cf.coefficient_derivatives(p, t)
    ra, rb, rc = riccati_rhs(p, g.a, g.b)
    assert rel(da, ra) < 1e-10
    assert rel(db, rb) < 1e-10
    assert rel(dc, rc) < 1e-10


def test_centered_differences_satisfy_odes():
    from entropic_liquidation.hjb import riccati_rhs

    p = illustration_params(rho=0.5)
    t = np.linspace(0.01, p.T - 0.01, 50)
    # a varies on a time scale of ~0.05 near maturity
    h = 1e-5
    gp, gm = cf.coefficient_grid(p, t + h), cf.coefficient_grid(p, t - h)
    g = cf.coefficient_grid(p, t)
    ra, rb, rc = riccati_rhs(p, g.a, g.b)
    for name, r in (("a", ra), ("b", rb), ("c", rc)):
        fd = (getattr(gp, name) - getattr(gm, name)) / (2 * h)
        assert rel(fd, r) < 1e-6, name


admissible = st.builds(
    lambda rho, gamma, beta_x, lam1, m, T: illustration_params().replace(
        gamma=gamma, beta=gamma / 2 * (1 + beta_x), lambda1=lam1, m=m, T=T
    ).with_rho(rho),
    rho=st.floats(0.0, 0.99),
    gamma=st.floats(1e-9, 1e-5),
    beta_x=st.floats(1e-3, 1e4),
    lam1=st.floats(1e-7, 1e-2),
    m=st.floats(1e3, 1e7),
    T=st.floats(0.1, 100.0),
)


@settings(max_examples=60, deadline=None)
@given(p=admissible, frac=st.floats(0.0, 1.0))
def test_properties_random_admissible(p, frac):
    t = frac * p.T
    c = cf.eval_coefficients(p, t)
    assert c.a < 0 and c.a_minus_gamma < 0
    assert c.ell >= 0
    assert cf.optimal_rate(p, t, c.ell) == pytest.approx(p.derived.v_bar_ell, rel=1e-9)
