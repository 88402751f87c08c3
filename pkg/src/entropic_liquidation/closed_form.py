"""Explicit Riccati coefficients, value function and optimal feedback policy.

All hyperbolic functions enter through three bounded, analytic kernels of
``x = omega * tau`` (``tau = T - t`` is time to maturity):

    T1(tau) = tanh(x) / omega         -> tau          as omega -> 0
    T2(tau) = (1 - sech x) / omega**2 -> tau**2 / 2   as omega -> 0
    sech(x)

so the same expressions cover the risk-neutral limit (``kappa*lambda2 = 0``),
``gamma = 0``, and horizons with ``omega * tau`` far beyond the range where
sinh/cosh overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateRegime, NonFinite, OutOfRange
from .params import RHO_ZERO, ModelParams, validate

_LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# kernels


def _g1(x: np.ndarray) -> np.ndarray:
    """tanh(x)/x, equal to 1 at x = 0."""
    out = np.ones_like(x)
    nz = x > 0
    out[nz] = np.tanh(x[nz]) / x[nz]
    return out


def _g2(x: np.ndarray) -> np.ndarray:
    """(1 - sech x)/x**2, equal to 1/2 at x = 0."""
    out = np.full_like(x, 0.5)
    small = (x > 0) & (x < 1.0)
    xs = x[small]
    out[small] = 2.0 * np.sinh(0.5 * xs) ** 2 / (xs * xs * np.cosh(xs))
    big = x >= 1.0
    xb = x[big]
    out[big] = (1.0 - _sech(xb)) / (xb * xb)
    return out


def _sech(x: np.ndarray) -> np.ndarray:
    e = np.exp(-x)
    return 2.0 * e / (1.0 + e * e)


def _lncosh(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    small = x < 1.0
    out[small] = np.log1p(2.0 * np.sinh(0.5 * x[small]) ** 2)
    big = ~small
    out[big] = x[big] + np.log1p(np.exp(-2.0 * x[big])) - _LN2
    return out


@dataclass(frozen=True)
class _Consts:
    mu: float  # 1 / (2 (eta + lambda1))
    rho: float
    s: float  # sqrt(rho)
    omega: float
    c2: float  # mu (2 beta (1 - rho) - gamma)


def _consts(p: ModelParams) -> _Consts:
    mu = 0.5 / (p.eta + p.lambda1)
    rho = p.rho
    if rho < RHO_ZERO:
        rho = 0.0
    s = math.sqrt(rho)
    return _Consts(mu=mu, rho=rho, s=s, omega=mu * p.gamma * s, c2=mu * (2.0 * p.beta * (1.0 - rho) - p.gamma))


def _tau(p: ModelParams, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > p.T):
        raise OutOfRange(f"t must lie in [0, T={p.T}]")
    return np.atleast_1d(p.T - t).astype(float)


@dataclass(frozen=True)
class _Kernels:
    T1: np.ndarray
    T2: np.ndarray
    sech: np.ndarray
    lncosh: np.ndarray
    tanh: np.ndarray


def _kernels(k: _Consts, tau: np.ndarray) -> _Kernels:
    x = k.omega * tau
    return _Kernels(
        T1=tau * _g1(x),
        T2=tau * tau * _g2(x),
        sech=_sech(x),
        lncosh=_lncosh(x),
        tanh=np.tanh(x),
    )


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class PolicyCoefficients:
    """Coefficients of the quadratic value function at one time point.

    ``a_minus_gamma`` is evaluated from its own closed form rather than as
    ``a - gamma``.
    """

    t: float
    a: float
    b: float
    c: float
    a_minus_gamma: float
    ell: float


@dataclass(frozen=True)
class CoefficientGrid:
    t: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    a_minus_gamma: np.ndarray
    ell: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def _evaluate(p: ModelParams, tau: np.ndarray):
    k = _consts(p)
    K = _kernels(k, tau)
    g, beta, mu, rho = p.gamma, p.beta, k.mu, k.rho
    lam1, vb = p.lambda1, p.v_bar

    Phi = 1.0 + k.c2 * K.T1
    num_a = (2.0 * beta - g) + 2.0 * beta * mu * rho * g * K.T1
    a = -num_a / Phi
    a_mg = -(2.0 * beta + mu * g * (2.0 * beta - g) * K.T1) / Phi
    num_b = 2.0 * lam1 * vb * mu * ((2.0 * beta - g) * K.T1 + 2.0 * beta * mu * rho * g * K.T2)
    b = num_b / Phi
    ell = num_b / num_a

    ln_phi = K.lncosh + np.log1p(k.c2 * K.T1)
    c = (
        2.0 * lam1**2 * vb**2 * mu * (K.T1 - 4.0 * beta * mu * rho * K.T2) / Phi
        + (g * p.m**2 * (1.0 - 2.0 * rho) / (2.0 * (1.0 - rho)) - lam1 * vb**2) * tau
        - p.m**2 * (p.eta + lam1) / (1.0 - rho) * ln_phi
    )
    return a, b, c, a_mg, ell


def coefficient_grid(p: ModelParams, times) -> CoefficientGrid:
    """Evaluate a, b, c, a - gamma and the schedule on an array of times."""
    validate(p, strict=False)
    t = np.atleast_1d(np.asarray(times, dtype=float))
    tau = _tau(p, t)
    a, b, c, a_mg, ell = _evaluate(p, tau)
    out = CoefficientGrid(t=t, a=a, b=b, c=c, a_minus_gamma=a_mg, ell=ell)
    if not all(np.all(np.isfinite(v)) for v in (a, b, c, a_mg, ell)):
        raise NonFinite("non-finite coefficient")
    return out


def eval_coefficients(p: ModelParams, t: float) -> PolicyCoefficients:
    g = coefficient_grid(p, [t])
    return PolicyCoefficients(
        t=float(t), a=float(g.a[0]), b=float(g.b[0]), c=float(g.c[0]),
        a_minus_gamma=float(g.a_minus_gamma[0]), ell=float(g.ell[0]),
    )


def coefficient_derivatives(p: ModelParams, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic time derivatives (da/dt, db/dt, dc/dt) of the closed form.

    Obtained by differentiating the kernel representation directly, not by
    evaluating the Riccati right-hand sides.
    """
    validate(p, strict=False)
    tau = _tau(p, times)
    k = _consts(p)
    K = _kernels(k, tau)
    g, beta, mu, rho = p.gamma, p.beta, k.mu, k.rho
    lam1, vb = p.lambda1, p.v_bar
    dT1 = K.sech**2
    dT2 = K.sech * K.T1

    Phi = 1.0 + k.c2 * K.T1
    dPhi = k.c2 * dT1

    num_a = (2.0 * beta - g) + 2.0 * beta * mu * rho * g * K.T1
    dnum_a = 2.0 * beta * mu * rho * g * dT1
    da = -(dnum_a * Phi - num_a * dPhi) / Phi**2

    kb = 2.0 * lam1 * vb * mu
    num_b = kb * ((2.0 * beta - g) * K.T1 + 2.0 * beta * mu * rho * g * K.T2)
    dnum_b = kb * ((2.0 * beta - g) * dT1 + 2.0 * beta * mu * rho * g * dT2)
    db = (dnum_b * Phi - num_b * dPhi) / Phi**2

    kp = 2.0 * lam1**2 * vb**2 * mu
    num_p = K.T1 - 4.0 * beta * mu * rho * K.T2
    dnum_p = dT1 - 4.0 * beta * mu * rho * dT2
    dP = kp * (dnum_p * Phi - num_p * dPhi) / Phi**2
    dln_phi = k.omega * K.tanh + dPhi / Phi
    dc = (
        dP
        + (g * p.m**2 * (1.0 - 2.0 * rho) / (2.0 * (1.0 - rho)) - lam1 * vb**2)
        - p.m**2 * (p.eta + lam1) / (1.0 - rho) * dln_phi
    )
    # d/dt = -d/dtau
    return -da, -db, -dc


# ---------------------------------------------------------------------------
# value function and feedback controls


def value_function(p: ModelParams, t, x):
    """w(t, x) = (a - gamma) x^2 / 2 + b x + c; broadcasts ``t`` against ``x``."""
    t_arr = np.asarray(t, dtype=float)
    g = coefficient_grid(p, t_arr.ravel())
    shape = t_arr.shape
    A, b, c = (v.reshape(shape) for v in (g.a_minus_gamma, g.b, g.c))
    x = np.asarray(x, dtype=float)
    w = 0.5 * A * x**2 + b * x + c
    return float(w) if np.ndim(w) == 0 else w


def _rate(p: ModelParams, a, b, x):
    return -(a * x + b - 2.0 * p.lambda1 * p.v_bar) / (2.0 * (p.eta + p.lambda1))


def _rate_mean_reverting(p: ModelParams, a, ell, x):
    return p.derived.v_bar_ell - a * (x - ell) / (2.0 * (p.eta + p.lambda1))


def optimal_rate(p: ModelParams, t: float, x: float) -> float:
    """Optimal trading rate in state feedback form.

    The direct form and the mean-reverting form around the schedule are both
    evaluated; a disagreement beyond rounding raises :class:`NonFinite`.
    """
    c = eval_coefficients(p, t)
    v1 = _rate(p, c.a, c.b, x)
    v2 = _rate_mean_reverting(p, c.a, c.ell, x)
    scale = (abs(c.a * x) + abs(c.b) + 2.0 * p.lambda1 * p.v_bar) / (2.0 * (p.eta + p.lambda1))
    if not math.isfinite(v1) or abs(v1 - v2) > 1e-9 * scale + 1e-300:
        raise NonFinite(f"rate forms disagree: {v1!r} vs {v2!r}")
    return v1


def optimal_rate_mean_reverting(p: ModelParams, t: float, x: float) -> float:
    c = eval_coefficients(p, t)
    return _rate_mean_reverting(p, c.a, c.ell, x)


@dataclass(frozen=True)
class BackwardControls:
    z1_tilde: float
    z2_tilde: float
    z1: float
    z2: float


def backward_controls(p: ModelParams, t: float, x: float) -> BackwardControls:
    c = eval_coefficients(p, t)
    h = p.eta + p.lambda1
    return BackwardControls(
        z1_tilde=-p.m * (c.a_minus_gamma * x + c.b),
        z2_tilde=0.0,
        z1=-p.m / (2.0 * h) * ((p.eta + 2.0 * p.lambda1) * (c.a * x + c.b) + 2.0 * p.eta * p.lambda1 * p.v_bar),
        z2=-p.sigma * x,
    )


class FeedbackPolicy:
    """Optimal feedback policy for one parameter set.

    Methods accept scalar ``t`` and scalar or array ``x``.
    """

    def __init__(self, params: ModelParams):
        self.params = validate(params, strict=False)

    def coefficients(self, t: float) -> PolicyCoefficients:
        return eval_coefficients(self.params, t)

    def rate(self, t: float, x):
        c = self.coefficients(t)
        return _rate(self.params, c.a, c.b, np.asarray(x, dtype=float))

    def rate_mean_reverting(self, t: float, x):
        c = self.coefficients(t)
        return _rate_mean_reverting(self.params, c.a, c.ell, np.asarray(x, dtype=float))

    def z1_tilde(self, t: float, x):
        c = self.coefficients(t)
        return -self.params.m * (c.a_minus_gamma * np.asarray(x, dtype=float) + c.b)

    def value(self, t: float, x):
        return value_function(self.params, t, x)


# ---------------------------------------------------------------------------
# asymptotic regimes


@dataclass(frozen=True)
class AsymptoticRegime:
    """Late-stage (small time to maturity) and early-stage (large) limits.

    ``a0`` is the small-horizon approximation obtained by replacing tanh by its
    argument; ``a0_variant`` is an alternative form whose denominator carries
    half the ``beta * kappa * lambda2`` term and does not match the exact
    solution. ``x_bar_inf`` is the fixed point of the early-stage
    mean-reverting position dynamics; ``x_bar_inf_variant`` is an alternative
    expression kept for comparison.
    """

    t: float
    ell0: float
    a0: float
    a0_variant: float
    ell_inf: Optional[float] = None
    a_inf: Optional[float] = None
    x_bar_inf: Optional[float] = None
    x_bar_inf_variant: Optional[float] = None


def late_stage(p: ModelParams, t: float) -> tuple[float, float, float]:
    """(ell0, a0, a0_variant) at time t."""
    validate(p, strict=False)
    tau = float(_tau(p, t)[0])
    k = _consts(p)
    g, beta, h = p.gamma, p.beta, p.eta + p.lambda1
    vbl = p.derived.v_bar_ell
    lam2m2 = k.mu * k.rho  # lambda2 m^2
    ell0 = vbl * tau / (1.0 + 2.0 * beta * g * lam2m2 * tau / (2.0 * beta - g))
    num = 2.0 * beta - g + 2.0 * beta * g * lam2m2 * tau
    a0 = -2.0 * h * num / ((2.0 * beta - g - 2.0 * beta * k.rho) * tau + 2.0 * h)
    a0_variant = -2.0 * h * num / ((2.0 * beta - g - 2.0 * beta * p.m**2 * p.lambda2 * h) * tau + 2.0 * h)
    return ell0, a0, a0_variant


def early_stage(p: ModelParams) -> tuple[float, float, float, float]:
    """(ell_inf, a_inf, x_bar_inf, x_bar_inf_variant)."""
    validate(p, strict=False)
    if p.gamma * p.m * math.sqrt(p.lambda2) == 0.0 or p.rho < RHO_ZERO:
        raise DegenerateRegime("early-stage limits need gamma, m, lambda2 > 0")
    s = math.sqrt(p.rho)
    lam1vb = p.lambda1 * p.v_bar
    ell_inf = 2.0 * lam1vb / (p.gamma * s)
    a_inf = -p.gamma * s / (1.0 - s)
    x_bar = ell_inf + 2.0 * lam1vb / a_inf
    x_bar_variant = 2.0 / p.gamma * (p.eta + p.lambda1) * (1.0 / s + 1.0) * lam1vb
    return ell_inf, a_inf, x_bar, x_bar_variant


def early_stage_ou_rate(p: ModelParams) -> float:
    """Mean-reversion speed -a_inf / (2 (eta + lambda1)) of the early-stage position."""
    _, a_inf, _, _ = early_stage(p)
    return -a_inf / (2.0 * (p.eta + p.lambda1))


def asymptotics(p: ModelParams, t: float, early: bool = True) -> AsymptoticRegime:
    ell0, a0, a0_variant = late_stage(p, t)
    if not early:
        return AsymptoticRegime(t=float(t), ell0=ell0, a0=a0, a0_variant=a0_variant)
    ell_inf, a_inf, x_bar, x_bar_variant = early_stage(p)
    return AsymptoticRegime(
        t=float(t), ell0=ell0, a0=a0, a0_variant=a0_variant,
        ell_inf=ell_inf, a_inf=a_inf, x_bar_inf=x_bar, x_bar_inf_variant=x_bar_variant,
    )


def risk_neutral_minus_a(p: ModelParams, t) -> np.ndarray:
    """-a(t) at lambda2 = 0, from the exact Riccati solution."""
    tau = _tau(p, t)
    h = p.eta + p.lambda1
    d = p.beta - p.gamma / 2.0
    return 2.0 * h * d / (h + d * tau)


def risk_neutral_minus_a_half(p: ModelParams, t) -> np.ndarray:
    """Alternative risk-neutral expression for -a(t); half of the exact limit."""
    tau = _tau(p, t)
    h = p.eta + p.lambda1
    d = p.beta - p.gamma / 2.0
    return h * d / (h + d * tau)
