import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entropic_liquidation import closed_form as cf
from entropic_liquidation import hjb, illustration_params
from entropic_liquidation.errors import BlowUp, GridError


@pytest.fixture
def p():
    return illustration_params(rho=0.5)


def H(p, x, q, v, Q=0.0):
    return hjb.hamiltonian(p, hjb.HamiltonianInput(x=x, q=q, Q=Q, v=v))


def test_maximizer_stationary(p):
    x, q = 4e5, -0.3
    v = hjb.hamiltonian_maximizer(p, x, q)
    scale = abs(q) + p.gamma * abs(x) + 2 * (p.eta + p.lambda1) * abs(v)
    assert abs(hjb.hamiltonian_dv(p, x, q, v)) < 1e-10 * scale


def test_maximizer_beats_perturbations(p):
    x, q, Q = -2e5, 0.7, -1e-3
    v = hjb.hamiltonian_maximizer(p, x, q)
    h0 = H(p, x, q, v, Q)
    for d in 10.0 ** np.arange(-3, 4):
        assert h0 >= H(p, x, q, v + d, Q)
        assert h0 >= H(p, x, q, v - d, Q)


def test_analytic_dv_matches_differences(p):
    x, q, v = 1e5, 0.2, 300.0
    exact = hjb.hamiltonian_dv(p, x, q, v)
    errs = []
    for d in (1.0, 0.5):
        fd = (H(p, x, q, v + d) - H(p, x, q, v - d)) / (2 * d)
        errs.append(abs(fd - exact))
    # H is quadratic in v so centered differences are exact up to rounding
    assert max(errs) < 1e-9 * abs(exact)


def test_maximizer_zero_numerator(p):
    x = 3e5
    q = 2 * p.lambda1 * p.v_bar - p.gamma * x
    assert hjb.hamiltonian_maximizer(p, x, q) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("t", [0.0, 1.3, 5.0])
def test_maximizer_is_feedback_rate(p, t):
    x = 7e5
    c = cf.eval_coefficients(p, t)
    q = c.a_minus_gamma * x + c.b
    assert hjb.hamiltonian_maximizer(p, x, q) == pytest.approx(cf.optimal_rate(p, t, x), rel=1e-12)


def test_maximizer_ignores_second_order(p):
    x, q = 1e5, 0.1
    vs = np.linspace(-5e4, 5e4, 2001)
    for Q in (-1.0, 0.0, 3.0):
        best = vs[np.argmax([H(p, x, q, v, Q) for v in vs])]
        assert abs(best - hjb.hamiltonian_maximizer(p, x, q)) <= vs[1] - vs[0]


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-2e6, 2e6), q=st.floats(-5.0, 5.0))
def test_grid_search_never_wins(x, q):
    p = illustration_params(rho=0.5)
    v = hjb.hamiltonian_maximizer(p, x, q)
    h0 = H(p, x, q, v)
    probe = v + np.linspace(-1e4, 1e4, 401)
    vals = [H(p, x, q, u) for u in probe]
    assert max(vals) <= h0 + 1e-12 * max(1.0, abs(h0))


def test_two_dimensional_maximizer(p):
    x = 5e5
    q = np.array([-0.4, 0.0])
    Q = np.zeros((2, 2))
    v = hjb.hamiltonian_2d_maximizer(p, x, q)
    assert v == pytest.approx(hjb.hamiltonian_maximizer(p, x, q[0]), rel=1e-14)
    for d in (1e-2, 1.0, 1e2):
        assert hjb.hamiltonian_2d(p, x, q, Q, v) >= hjb.hamiltonian_2d(p, x, q, Q, v + d)
    q2 = np.array([-0.4, 2.0])
    v2 = hjb.hamiltonian_2d_maximizer(p, x, q2)
    for d in (1e-2, 1.0, 1e2):
        assert hjb.hamiltonian_2d(p, x, q2, Q, v2) >= hjb.hamiltonian_2d(p, x, q2, Q, v2 - d)


def _grid(p, n=200):
    return hjb.Grid.uniform(0.0, p.T, n, -2 * p.x0, 2 * p.x0, n)


def test_closed_form_residual(p):
    g = _grid(p)
    rep = hjb.hjb_residual(p, hjb.closed_form_surface(p, g), g)
    assert rep.max_rel_residual < 1e-8
    assert rep.nt == rep.nx == 200
    assert rep.max_abs_residual >= 0 and rep.max_term > 0
    assert set(rep.to_dict()) >= {"max_abs_residual", "max_rel_residual", "worst_t", "worst_x"}


def test_perturbed_surface_detected(p):
    g = _grid(p)
    s = hjb.closed_form_surface(p, g)
    clean = hjb.hjb_residual(p, s, g).max_rel_residual
    bad = hjb.hjb_residual(p, s.shifted(1e-3, g.x), g).max_rel_residual
    assert bad > 10 * clean
    assert bad > 1e-3


def test_terminal_slice(rho_params):
    x = np.linspace(-2e6, 2e6, 101)
    assert np.all(hjb.terminal_mismatch(rho_params, x) == 0.0)


@pytest.mark.parametrize(
    "grid",
    [
        hjb.Grid(t=np.array([0.0]), x=np.linspace(0, 1, 5)),
        hjb.Grid(t=np.linspace(0, 1, 5), x=np.array([])),
        hjb.Grid(t=np.array([0.0, 1.0, 0.5]), x=np.linspace(0, 1, 5)),
    ],
)
def test_degenerate_grids(p, grid):
    with pytest.raises(GridError):
        hjb.closed_form_surface(p, grid)


def test_fd_derivatives_exact_on_polynomials():
    g = hjb.Grid.uniform(0.0, 1.0, 9, -1.0, 1.0, 11)
    t, x = np.meshgrid(g.t, g.x, indexing="ij")
    s = hjb.finite_difference_surface(t**3 - 2 * t * x**2 + x**4, g)
    np.testing.assert_allclose(s.w_t, 3 * t**2 - 2 * x**2, atol=1e-10)
    np.testing.assert_allclose(s.w_x, -4 * t * x + 4 * x**3, atol=1e-10)
    np.testing.assert_allclose(s.w_xx, -4 * t + 12 * x**2, atol=1e-8)


def test_fd_residual_converges(p):
    # the closed form sampled on a grid and differentiated numerically
    res = []
    for n in (321, 641, 1281):
        g = hjb.Grid.uniform(0.0, p.T, n, -2 * p.x0, 2 * p.x0, 11)
        w = cf.value_function(p, g.t[:, None], g.x[None, :])
        res.append(hjb.hjb_residual(p, hjb.finite_difference_surface(w, g), g).max_rel_residual)
    assert res[0] > res[1] > res[2]
    assert res[1] / res[2] > 8


def test_fd_surface_needs_uniform_grid(p):
    g = hjb.Grid(t=np.array([0.0, 1.0, 3.0, 4.0, 5.0, 6.0]), x=np.linspace(0, 1, 6))
    with pytest.raises(GridError):
        hjb.finite_difference_surface(np.zeros((6, 6)), g)


@pytest.mark.parametrize("rho", [0.0, 0.5, 0.9])
def test_rk4_matches_closed_form(rho):
    q = illustration_params(rho=rho)
    sol = hjb.integrate_riccati(q, 100_000)
    assert (sol.a[-1], sol.b[-1], sol.c[-1]) == (-2 * q.beta + q.gamma, 0.0, 0.0)
    assert sol.t[0] == 0.0 and sol.t[-1] == q.T
    gaps = hjb.riccati_gap(q, 100_000)
    assert max(gaps.values()) < 1e-8


def test_rk4_fourth_order():
    q = illustration_params(rho=0.5)
    # the terminal rate is stiff; the asymptotic regime starts near 400 steps
    e1 = max(hjb.riccati_gap(q, 400).values())
    e2 = max(hjb.riccati_gap(q, 800).values())
    assert e1 / e2 == pytest.approx(16, rel=0.1)


def test_rk4_guards(p):
    with pytest.raises(ValueError):
        hjb.integrate_riccati(p, 9)
    with pytest.raises(BlowUp):
        hjb.integrate_riccati(p, 100, bound=1e-6)


def test_sup_relative_gap():
    assert hjb.sup_relative_gap(np.zeros(3), np.zeros(3)) == 0.0
    assert hjb.sup_relative_gap(np.array([2.0, -4.0]), np.array([2.0, -3.0])) == 0.25
