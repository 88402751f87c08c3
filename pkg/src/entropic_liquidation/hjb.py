"""Hamiltonian, HJB residual checks and a numerical Riccati integrator.

These are verification tools for the closed form; nothing here solves the HJB
equation from scratch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import closed_form
from .costs import driver
from .errors import BlowUp, GridError
from .params import ModelParams, validate


# ---------------------------------------------------------------------------
# Hamiltonian


@dataclass(frozen=True)
class HamiltonianInput:
    x: float
    q: float
    Q: float
    v: float


def hamiltonian(p: ModelParams, inp: HamiltonianInput) -> float:
    """Reduced one-dimensional Hamiltonian in the position variable.

    ``q`` and ``Q`` stand for w_x and w_xx; the backward control is
    ``Z_tilde = (-m q, 0)``.
    """
    x, q, Q, v = inp.x, inp.q, inp.Q, inp.v
    return 0.5 * p.m**2 * Q - v * q - driver(p, x, -p.m * q, 0.0, v)


def hamiltonian_dv(p: ModelParams, x: float, q: float, v: float) -> float:
    return -q - 2.0 * (p.eta + p.lambda1) * v - (p.gamma * x - 2.0 * p.lambda1 * p.v_bar)


def hamiltonian_maximizer(p: ModelParams, x, q):
    """Unique maximizer in v; independent of the second-order argument."""
    return -(q + p.gamma * x - 2.0 * p.lambda1 * p.v_bar) / (2.0 * (p.eta + p.lambda1))


def volatility_matrix(p: ModelParams) -> np.ndarray:
    return np.array([[p.m, 0.0], [p.gamma * p.m, p.sigma]])


def hamiltonian_2d(p: ModelParams, x: float, q, Q, v: float) -> float:
    """Hamiltonian over the (X, S) system with gradient ``q`` and Hessian ``Q``.

    Uses the diffusion generator convention 1/2 tr(Sigma Sigma^T Q).
    """
    q = np.asarray(q, dtype=float)
    Q = np.asarray(Q, dtype=float)
    sig = volatility_matrix(p)
    drift = np.array([-v, -p.gamma * v])
    z = -sig.T @ q
    return float(0.5 * np.trace(sig @ sig.T @ Q) + drift @ q - driver(p, x, z[0], z[1], v))


def hamiltonian_2d_maximizer(p: ModelParams, x: float, q) -> float:
    q1, q2 = q
    return -(q1 + p.gamma * q2 + p.gamma * x - 2.0 * p.lambda1 * p.v_bar) / (2.0 * (p.eta + p.lambda1))


# ---------------------------------------------------------------------------
# HJB residual


@dataclass(frozen=True)
class Grid:
    t: np.ndarray
    x: np.ndarray

    @classmethod
    def uniform(cls, t0: float, t1: float, nt: int, x0: float, x1: float, nx: int) -> "Grid":
        return cls(t=np.linspace(t0, t1, nt), x=np.linspace(x0, x1, nx))

    def check(self) -> None:
        for name, g in (("t", self.t), ("x", self.x)):
            g = np.asarray(g)
            if g.ndim != 1 or g.size < 2:
                raise GridError(f"{name} grid needs at least two points")
            if not np.all(np.isfinite(g)) or np.any(np.diff(g) <= 0):
                raise GridError(f"{name} grid must be finite and strictly increasing")


@dataclass(frozen=True)
class ValueSurface:
    """Candidate value function and its derivatives on a (t, x) mesh, shape (nt, nx)."""

    w: np.ndarray
    w_t: np.ndarray
    w_x: np.ndarray
    w_xx: np.ndarray

    def shifted(self, eps: float, x: np.ndarray) -> "ValueSurface":
        """The surface w + eps x^2."""
        x = np.asarray(x)[None, :]
        return ValueSurface(
            w=self.w + eps * x**2, w_t=self.w_t, w_x=self.w_x + 2.0 * eps * x, w_xx=self.w_xx + 2.0 * eps,
        )


def closed_form_surface(p: ModelParams, grid: Grid) -> ValueSurface:
    grid.check()
    g = closed_form.coefficient_grid(p, grid.t)
    da, db, dc = closed_form.coefficient_derivatives(p, grid.t)
    A = g.a_minus_gamma[:, None]
    b = g.b[:, None]
    x = grid.x[None, :]
    return ValueSurface(
        w=0.5 * A * x**2 + b * x + g.c[:, None],
        w_t=0.5 * da[:, None] * x**2 + db[:, None] * x + dc[:, None],
        w_x=A * x + b,
        w_xx=np.broadcast_to(A, (grid.t.size, grid.x.size)).copy(),
    )


def _fd_weights(offsets, order: int) -> np.ndarray:
    """Finite-difference weights on integer ``offsets`` for the given derivative order."""
    offsets = np.asarray(offsets, dtype=float)
    n = offsets.size
    V = np.vander(offsets, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(V, rhs)


def _stencils(n: int, order: int):
    width = 5 if order == 1 else 6
    out = []
    for i in range(n):
        if 2 <= i <= n - 3:
            offs = np.arange(-2, 3)
        elif i < 2:
            offs = np.arange(-i, width - i)
        else:
            offs = np.arange(n - 1 - i - width + 1, n - i)
        out.append((offs, _fd_weights(offs, order)))
    return out


def _derivative(f: np.ndarray, h: float, axis: int, order: int) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    n = f.shape[0]
    if n < 6:
        raise GridError("finite differences need at least 6 points per axis")
    out = np.empty_like(f)
    for i, (offs, wts) in enumerate(_stencils(n, order)):
        out[i] = np.tensordot(wts, f[i + offs], axes=1)
    return np.moveaxis(out / h**order, 0, axis)


def finite_difference_surface(w: np.ndarray, grid: Grid) -> ValueSurface:
    """Derivatives of sampled values by 4th-order differences (one-sided at edges)."""
    grid.check()
    dt = np.diff(grid.t)
    dx = np.diff(grid.x)
    if not (np.allclose(dt, dt[0], rtol=1e-9) and np.allclose(dx, dx[0], rtol=1e-9)):
        raise GridError("finite differences need uniform grids")
    w = np.asarray(w, dtype=float)
    if w.shape != (grid.t.size, grid.x.size):
        raise GridError("surface shape does not match grid")
    return ValueSurface(
        w=w,
        w_t=_derivative(w, dt[0], 0, 1),
        w_x=_derivative(w, dx[0], 1, 1),
        w_xx=_derivative(w, dx[0], 1, 2),
    )


@dataclass(frozen=True)
class HjbResidualReport:
    t_range: tuple[float, float]
    x_range: tuple[float, float]
    nt: int
    nx: int
    dt: float
    dx: float
    max_abs_residual: float
    max_rel_residual: float
    worst_t: float
    worst_x: float
    max_term: float

    def to_dict(self) -> dict:
        return asdict(self)


def hjb_terms(p: ModelParams, s: ValueSurface, x: np.ndarray) -> list[np.ndarray]:
    """The individual additive terms of the reduced HJB equation."""
    x = np.broadcast_to(np.asarray(x)[None, :], s.w.shape)
    h = p.eta + p.lambda1
    lv = p.lambda1 * p.v_bar
    shape = s.w.shape
    return [
        s.w_t,
        0.5 * p.m**2 * s.w_xx,
        -0.5 * p.lambda2 * p.m**2 * s.w_x**2,
        np.full(shape, p.gamma * p.m**2),
        np.full(shape, -lv * p.v_bar),
        (s.w_x + p.gamma * x - 2.0 * lv) ** 2 / (4.0 * h),
    ]


def hjb_residual(p: ModelParams, surface: ValueSurface, grid: Grid) -> HjbResidualReport:
    """Pointwise HJB residual; the relative residual at each point is divided by
    the largest absolute term there."""
    validate(p)
    grid.check()
    if surface.w.shape != (grid.t.size, grid.x.size):
        raise GridError("surface shape does not match grid")
    terms = hjb_terms(p, surface, grid.x)
    total = np.zeros(surface.w.shape)
    for term in terms:
        total = total + term
    scale = np.max(np.abs(np.stack(terms)), axis=0)
    res = np.abs(total)
    rel = np.divide(res, scale, out=np.zeros_like(res), where=scale > 0)
    i, j = np.unravel_index(np.argmax(rel), rel.shape)
    return HjbResidualReport(
        t_range=(float(grid.t[0]), float(grid.t[-1])),
        x_range=(float(grid.x[0]), float(grid.x[-1])),
        nt=int(grid.t.size),
        nx=int(grid.x.size),
        dt=float(grid.t[1] - grid.t[0]),
        dx=float(grid.x[1] - grid.x[0]),
        max_abs_residual=float(res.max()),
        max_rel_residual=float(rel.max()),
        worst_t=float(grid.t[i]),
        worst_x=float(grid.x[j]),
        max_term=float(scale.max()),
    )


def terminal_mismatch(p: ModelParams, x) -> np.ndarray:
    """|w(T, x) + beta x^2| at the terminal slice."""
    x = np.asarray(x, dtype=float)
    return np.abs(closed_form.value_function(p, p.T, x) + p.beta * x**2)


# ---------------------------------------------------------------------------
# numerical Riccati integration


@dataclass(frozen=True)
class RiccatiSolution:
    t: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


def riccati_rhs(p: ModelParams, a: float, b: float) -> tuple[float, float, float]:
    """Time derivatives (da/dt, db/dt, dc/dt) of the Riccati system."""
    h = p.eta + p.lambda1
    m2l2 = p.m**2 * p.lambda2
    k = m2l2 - 1.0 / (2.0 * h)
    g = p.gamma
    lv = p.lambda1 * p.v_bar
    da = k * a * a - 2.0 * m2l2 * g * a + m2l2 * g * g
    db = k * a * b - m2l2 * g * b + lv / h * a
    dc = (
        0.5 * k * b * b + lv / h * b - 0.5 * p.m**2 * a - 0.5 * p.m**2 * g
        + lv * p.v_bar - lv * lv / h
    )
    return da, db, dc


def integrate_riccati(p: ModelParams, steps: int, bound: float = 1e150) -> RiccatiSolution:
    """Classical RK4 from the terminal values, stepping in time to maturity.

    Returns samples on the uniform grid ``t_k = k T / steps`` in increasing t.
    """
    validate(p)
    if steps < 10:
        raise ValueError("steps must be >= 10")
    h = p.T / steps
    a, b, c = -2.0 * p.beta + p.gamma, 0.0, 0.0
    A = np.empty(steps + 1)
    B = np.empty(steps + 1)
    C = np.empty(steps + 1)
    A[0], B[0], C[0] = a, b, c

    # tau-derivative is minus the t-derivative
    def f(a, b):
        da, db, dc = riccati_rhs(p, a, b)
        return -da, -db, -dc

    for k in range(1, steps + 1):
        k1 = f(a, b)
        k2 = f(a + 0.5 * h * k1[0], b + 0.5 * h * k1[1])
        k3 = f(a + 0.5 * h * k2[0], b + 0.5 * h * k2[1])
        k4 = f(a + h * k3[0], b + h * k3[1])
        a += h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        b += h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        c += h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        if not (abs(a) < bound and abs(b) < bound and abs(c) < bound):
            raise BlowUp(f"Riccati solution exceeded {bound:g} at tau={k * h:g}")
        A[k], B[k], C[k] = a, b, c
    tau = h * np.arange(steps + 1)
    t = p.T - tau
    t[-1] = 0.0
    return RiccatiSolution(t=t[::-1].copy(), a=A[::-1].copy(), b=B[::-1].copy(), c=C[::-1].copy())


def sup_relative_gap(reference: np.ndarray, other: np.ndarray) -> float:
    """max |other - reference| / max |reference|; zero when both vanish."""
    ref = np.max(np.abs(reference))
    diff = np.max(np.abs(np.asarray(other) - np.asarray(reference)))
    if ref == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return float(diff / ref)


def riccati_gap(p: ModelParams, steps: int) -> dict[str, float]:
    """Sup-norm relative gaps between RK4 samples and the closed form."""
    sol = integrate_riccati(p, steps)
    g = closed_form.coefficient_grid(p, sol.t)
    return {
        "a": sup_relative_gap(g.a, sol.a),
        "b": sup_relative_gap(g.b, sol.b),
        "c": sup_relative_gap(g.c, sol.c),
    }
