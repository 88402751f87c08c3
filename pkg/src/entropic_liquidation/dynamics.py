"""Euler-Maruyama simulation of position, prices, P&L and the backward value path.

Noise is drawn per path from a counter-based generator keyed by
``(seed, path index)``, so a path is reproducible whatever the batch size or
worker count. Batches are processed in fixed work units of ``CHUNK`` paths and
every aggregate is reduced in unit order.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import closed_form
from .costs import driver, running_cost
from .errors import NonFinite
from .params import ModelParams, validate

CHUNK = 8192
DEFAULT_SEED = 12345

PROOF = "proof"
LITERAL = "literal"

CSV_COLUMNS = ("t", "X", "S", "S_tilde", "v", "Pi0_direct", "Pi0_closed", "Y")


# ---------------------------------------------------------------------------
# controls


Affine = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class MarkovControl:
    """Feedback rule ``v = rule(t, x)`` (vectorized in ``x``).

    ``affine`` optionally maps a time grid to slope and intercept arrays with
    ``v = k(t) x + c(t)``; the simulator uses it to avoid per-step rule calls.
    """

    rule: Callable[[float, np.ndarray], np.ndarray]
    tag: str
    affine: Optional[Affine] = None

    def on_grid(self, times: np.ndarray) -> Callable[[int, np.ndarray], np.ndarray]:
        if self.affine is not None:
            k, c = self.affine(times)
            return lambda i, x: k[i] * x + c[i]
        return lambda i, x: np.asarray(self.rule(float(times[i]), x), dtype=float)


def _affine_control(k_fn: Affine, tag: str) -> MarkovControl:
    def rule(t, x):
        k, c = k_fn(np.array([t], dtype=float))
        return k[0] * np.asarray(x, dtype=float) + c[0]

    return MarkovControl(rule=rule, tag=tag, affine=k_fn)


def _optimal_affine(p: ModelParams) -> Affine:
    h2 = 2.0 * (p.eta + p.lambda1)

    def affine(times):
        g = closed_form.coefficient_grid(p, times)
        return -g.a / h2, -(g.b - 2.0 * p.lambda1 * p.v_bar) / h2

    return affine


def optimal_control(p: ModelParams) -> MarkovControl:
    return _affine_control(_optimal_affine(p), "optimal")


def scaled_control(p: ModelParams, eps: float) -> MarkovControl:
    """(1 + eps) times the optimal rate."""
    base = _optimal_affine(p)

    def affine(times):
        k, c = base(times)
        return (1.0 + eps) * k, (1.0 + eps) * c

    return _affine_control(affine, f"scaled({eps:+g})")


def shifted_control(p: ModelParams, dv: float) -> MarkovControl:
    """Optimal rate plus a constant ``dv``."""
    base = _optimal_affine(p)

    def affine(times):
        k, c = base(times)
        return k, c + dv

    return _affine_control(affine, f"shifted({dv:+g})")


def constant_control(v: float) -> MarkovControl:
    def affine(times):
        return np.zeros_like(times), np.full_like(times, v)

    return _affine_control(affine, f"constant({v:g})")


# ---------------------------------------------------------------------------
# noise


def _path_generator(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(path,))))


def brownian_increments(
    seed: int, paths: Sequence[int], N: int, dt: float, with_b2: bool = True
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Increments (dB1, dB2) of shape (len(paths), N) for the given path indices.

    Each path draws its B1 increments first, so skipping B2 leaves B1 unchanged.
    """
    n = len(paths)
    dB1 = np.empty((n, N))
    dB2 = np.empty((n, N)) if with_b2 else None
    sq = np.sqrt(dt)
    for r, i in enumerate(paths):
        g = _path_generator(seed, int(i))
        dB1[r] = g.standard_normal(N)
        if with_b2:
            dB2[r] = g.standard_normal(N)
    dB1 *= sq
    if with_b2:
        dB2 *= sq
    return dB1, dB2


def coarsen(dB: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` increments along the last axis."""
    n = dB.shape[-1]
    if n % factor:
        raise ValueError("step count not divisible by factor")
    return dB.reshape(*dB.shape[:-1], n // factor, factor).sum(axis=-1)


# ---------------------------------------------------------------------------
# core stepping


def _time_grid(p: ModelParams, N: int, t0: float = 0.0) -> np.ndarray:
    if not 0.0 <= t0 < p.T:
        raise ValueError("start time must lie in [0, T)")
    t = np.linspace(t0, p.T, N + 1)
    t[-1] = p.T
    return t


def _run(
    p: ModelParams,
    ctrl: MarkovControl,
    times: np.ndarray,
    dB1: np.ndarray,
    dB2: Optional[np.ndarray],
    *,
    closed_loop: bool = False,
    convention: str = PROOF,
    record: bool = False,
    pnl: bool = True,
    track_gap: bool = False,
    x_init: Optional[float] = None,
    on_step: Optional[Callable[[int, np.ndarray], None]] = None,
) -> dict:
    """Simulate a block of paths stored row-wise in ``dB1``/``dB2``.

    ``dB2`` may be None when neither prices nor P&L are needed.
    """
    n, N = dB1.shape
    dt = times[1] - times[0]
    rate = ctrl.on_grid(times)
    # time-major copies so each step reads contiguous memory
    W1 = np.ascontiguousarray(dB1.T)
    W2 = np.ascontiguousarray(dB2.T) if pnl else None
    x_start = float(p.x0 if x_init is None else x_init)
    X = np.full(n, x_start)
    cost = np.zeros(n)
    if pnl:
        S = np.full(n, float(p.s0))
        drift_direct = np.zeros(n)
        ito_direct = np.zeros(n)
        v2_sum = np.zeros(n)
        vdB1 = np.zeros(n)
        XdB2 = np.zeros(n)
    Y = None
    if closed_loop:
        g = closed_form.coefficient_grid(p, times)
        Y = np.full(n, closed_form.value_function(p, times[0], x_start))
    rec = None
    if record:
        if not pnl:
            raise ValueError("recording requires pnl=True")
        rec = {k: np.empty((n, N + 1)) for k in ("X", "S", "v", "Pd", "Pc", "Y")}
        rec["t0"] = times[0]

    h = p.eta + p.lambda1
    lin = p.gamma
    const = -2.0 * p.lambda1 * p.v_bar
    offset = p.gamma * p.m**2 - p.lambda1 * p.v_bar**2
    half_dt = 0.5 * dt

    def phi_of(X, v):
        return (h * v + lin * X + const) * v - offset

    track_gap = track_gap and pnl
    gap_max = np.zeros(n)

    def update_gap(t):
        pd = X * (S - p.s0) + drift_direct + ito_direct
        pc = _pi_closed(p, X, x_start, t - times[0], v2_sum, vdB1, XdB2, dt)
        np.maximum(gap_max, np.abs(pd - pc), out=gap_max)

    dX = np.empty(n)
    # overflow is detected once after the loop rather than per step
    with np.errstate(over="ignore", invalid="ignore"):
        v = rate(0, X)
        phi = phi_of(X, v)
        for i in range(N):
            if on_step is not None:
                on_step(i, X)
            if track_gap and i > 0:
                update_gap(times[i])
            b1 = W1[i]
            if rec is not None:
                _record(p, rec, i, X, S, v, drift_direct, ito_direct, v2_sum, vdB1, XdB2, dt, times[i], Y)
            np.multiply(v, -dt, out=dX)
            dX += p.m * b1
            if pnl:
                b2 = W2[i]
                dS = p.gamma * dX + p.sigma * b2
                # trapezoid in the price for the dt part, left point for the Ito part
                drift_direct -= (p.s0 - (S + 0.5 * dS) + p.eta * v) * v * dt
                ito_direct += (p.s0 - (S - p.eta * v)) * p.m * b1
                v2_sum += v * v
                vdB1 += v * b1
                XdB2 += X * b2
                S += dS
            if closed_loop:
                z1 = -p.m * (g.a_minus_gamma[i] * X + g.b[i])
                gt = driver(p, X, z1, 0.0, v)
                if convention == PROOF:
                    Y = Y + gt * dt - z1 * b1
                else:
                    Y = Y - gt * dt + z1 * b1
            X += dX
            # trapezoid along the simulated path: the rate applied over the step is v_i
            phi += phi_of(X, v)
            phi *= half_dt
            cost += phi
            v = rate(i + 1, X)
            phi = phi_of(X, v)
    finite = np.all(np.isfinite(X)) and np.all(np.isfinite(cost))
    if pnl:
        finite = finite and np.all(np.isfinite(S))
    if not finite:
        raise NonFinite("state became non-finite; control may be explosive")
    if on_step is not None:
        on_step(N, X)
    if track_gap:
        update_gap(times[N])
    if rec is not None:
        _record(p, rec, N, X, S, v, drift_direct, ito_direct, v2_sum, vdB1, XdB2, dt, times[N], Y)

    out = {"X_T": X, "cost": p.beta * X * X + cost, "record": rec}
    if pnl:
        out["S_T"] = S
        out["Pi_direct"] = X * (S - p.s0) + drift_direct + ito_direct
        out["Pi_closed"] = _pi_closed(p, X, x_start, times[-1] - times[0], v2_sum, vdB1, XdB2, dt)
    if track_gap:
        out["gap_max"] = gap_max
    if closed_loop:
        out["Y_T"] = Y
        out["eps_T"] = Y + p.beta * X * X
    return out


def _pi_closed(p, X, x_start, t, v2_sum, vdB1, XdB2, dt):
    return (
        0.5 * p.gamma * (X * X - x_start**2)
        + 0.5 * p.gamma * p.m**2 * t
        - p.eta * v2_sum * dt
        + p.eta * p.m * vdB1
        + p.sigma * XdB2
    )


def _record(p, rec, i, X, S, v, drift_direct, ito_direct, v2_sum, vdB1, XdB2, dt, t, Y):
    rec["X"][:, i] = X
    rec["S"][:, i] = S
    rec["v"][:, i] = v
    rec["Pd"][:, i] = X * (S - p.s0) + drift_direct + ito_direct
    rec["Pc"][:, i] = _pi_closed(p, X, rec["X"][0, 0], t - rec["t0"], v2_sum, vdB1, XdB2, dt)
    rec["Y"][:, i] = np.nan if Y is None else Y


# ---------------------------------------------------------------------------
# single paths


@dataclass(frozen=True)
class SimPath:
    times: np.ndarray
    X: np.ndarray
    S: np.ndarray
    S_tilde: np.ndarray
    v: np.ndarray
    Pi0_direct: np.ndarray
    Pi0_closed: np.ndarray
    Y: Optional[np.ndarray]
    dB1: np.ndarray
    dB2: np.ndarray
    beta: float = 0.0
    tag: str = ""

    @property
    def eps_T(self) -> float:
        """Terminal mismatch Y(T) + beta X(T)^2 (closed-loop paths only)."""
        if self.Y is None:
            raise ValueError("path has no backward component")
        return float(self.Y[-1] + self.beta * self.X[-1] ** 2)

    def to_csv(self, path_id: Optional[int] = None) -> str:
        buf = io.StringIO()
        write_paths_csv(buf, [self] if path_id is None else {path_id: self}, with_id=path_id is not None)
        return buf.getvalue()


def _path_from_record(p, times, rec, r, dB1, dB2, tag, closed_loop) -> SimPath:
    v = rec["v"][r]
    return SimPath(
        times=times,
        X=rec["X"][r],
        S=rec["S"][r],
        S_tilde=rec["S"][r] - p.eta * v,
        v=v,
        Pi0_direct=rec["Pd"][r],
        Pi0_closed=rec["Pc"][r],
        Y=rec["Y"][r] if closed_loop else None,
        dB1=dB1[r],
        dB2=dB2[r],
        beta=p.beta,
        tag=tag,
    )


def _check_steps(N: int) -> None:
    if int(N) != N or N < 2:
        raise ValueError("N must be an integer >= 2")


def simulate_forward(
    p: ModelParams,
    ctrl: MarkovControl,
    N: int,
    seed: int,
    path: int = 0,
    increments: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> SimPath:
    """Simulate one path under ``ctrl``; ``path`` selects the noise substream."""
    validate(p, strict=False)
    _check_steps(N)
    times = _time_grid(p, N)
    if increments is None:
        dB1, dB2 = brownian_increments(seed, [path], N, times[1])
    else:
        dB1, dB2 = (np.asarray(d, dtype=float).reshape(1, N) for d in increments)
    out = _run(p, ctrl, times, dB1, dB2, record=True)
    return _path_from_record(p, times, out["record"], 0, dB1, dB2, ctrl.tag, False)


def simulate_closed_loop(
    p: ModelParams,
    N: int,
    seed: int,
    path: int = 0,
    convention: str = PROOF,
    increments: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> SimPath:
    """Simulate X under the optimal feedback together with the backward value Y.

    ``convention="proof"`` integrates dY = g dt - Z1 dB1 (the sign making
    Y(t) = w(t, X(t))); ``"literal"`` uses dY = -g dt + Z1 dB1 + Z2 dB2.
    """
    validate(p, strict=False)
    _check_steps(N)
    if convention not in (PROOF, LITERAL):
        raise ValueError(f"unknown convention {convention!r}")
    times = _time_grid(p, N)
    if increments is None:
        dB1, dB2 = brownian_increments(seed, [path], N, times[1])
    else:
        dB1, dB2 = (np.asarray(d, dtype=float).reshape(1, N) for d in increments)
    out = _run(p, optimal_control(p), times, dB1, dB2, closed_loop=True, convention=convention, record=True)
    return _path_from_record(p, times, out["record"], 0, dB1, dB2, "optimal", True)


def pnl_identity_check(path: SimPath) -> float:
    """max over the grid of |Pi0_direct - Pi0_closed|."""
    return float(np.max(np.abs(path.Pi0_direct - path.Pi0_closed)))


# ---------------------------------------------------------------------------
# batches


@dataclass
class BatchResult:
    """Per-path terminal quantities plus fixed-order ensemble moments of X(t)."""

    times: np.ndarray
    X_T: np.ndarray
    Pi_direct: Optional[np.ndarray]
    Pi_closed: Optional[np.ndarray]
    cost: np.ndarray
    eps_T: Optional[np.ndarray]
    gap_max: Optional[np.ndarray]
    x_sum: np.ndarray
    x_sq_sum: np.ndarray
    paths: int
    tag: str = ""
    kept: dict = field(default_factory=dict)

    @property
    def x_mean(self) -> np.ndarray:
        return self.x_sum / self.paths

    @property
    def x_stderr(self) -> np.ndarray:
        n = self.paths
        var = np.maximum(self.x_sq_sum / n - self.x_mean**2, 0.0) * n / max(n - 1, 1)
        return np.sqrt(var / n)


def simulate_batch(
    p: ModelParams,
    ctrl: Optional[MarkovControl],
    N: int,
    seed: int,
    paths: int,
    *,
    closed_loop: bool = False,
    convention: str = PROOF,
    workers: int = 1,
    keep: Sequence[int] = (),
    pnl: bool = True,
    track_gap: bool = False,
    t0: float = 0.0,
    x_init: Optional[float] = None,
    increments: Optional[Callable[[Sequence[int]], tuple[np.ndarray, np.ndarray]]] = None,
) -> BatchResult:
    """Simulate ``paths`` independent paths; results do not depend on ``workers``.

    ``ctrl=None`` with ``closed_loop=True`` uses the optimal feedback.
    ``increments`` may supply noise for a list of path indices (used for
    nested-grid convergence studies); by default each path draws its own stream.
    ``pnl=False`` skips prices and P&L, which is all the objective needs;
    ``track_gap`` records each path's max over the grid of
    |Pi0_direct - Pi0_closed|.
    """
    validate(p, strict=False)
    _check_steps(N)
    if paths < 1:
        raise ValueError("paths must be >= 1")
    if ctrl is None:
        ctrl = optimal_control(p)
    times = _time_grid(p, N, t0)
    dt = times[1] - times[0]
    keep = sorted(set(int(k) for k in keep))
    chunks = [range(s, min(s + CHUNK, paths)) for s in range(0, paths, CHUNK)]

    def work(ids):
        if increments is None:
            dB1, dB2 = brownian_increments(seed, ids, N, dt, with_b2=pnl or bool(keep))
        else:
            dB1, dB2 = increments(ids)
        xs = np.zeros(N + 1)
        xq = np.zeros(N + 1)

        def on_step(i, X):
            xs[i] = X.sum()
            xq[i] = (X * X).sum()

        local_keep = [k - ids.start for k in keep if ids.start <= k < ids.stop]
        out = _run(
            p, ctrl, times, dB1, dB2, closed_loop=closed_loop, convention=convention,
            record=bool(local_keep), pnl=pnl or bool(keep), track_gap=track_gap, x_init=x_init,
            on_step=on_step,
        )
        kept = {
            ids.start + r: _path_from_record(p, times, out["record"], r, dB1, dB2, ctrl.tag, closed_loop)
            for r in local_keep
        }
        return out, xs, xq, kept

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(c) for c in chunks]

    x_sum = np.zeros(N + 1)
    x_sq = np.zeros(N + 1)
    kept = {}
    for _, xs, xq, k in results:
        x_sum += xs
        x_sq += xq
        kept.update(k)

    def cat(key):
        return np.concatenate([r[0][key] for r in results])

    return BatchResult(
        times=times,
        X_T=cat("X_T"),
        Pi_direct=cat("Pi_direct") if pnl else None,
        Pi_closed=cat("Pi_closed") if pnl else None,
        cost=cat("cost"),
        eps_T=cat("eps_T") if closed_loop else None,
        gap_max=cat("gap_max") if track_gap and pnl else None,
        x_sum=x_sum,
        x_sq_sum=x_sq,
        paths=paths,
        tag=ctrl.tag,
        kept=kept,
    )


def simulate_costs(
    p: ModelParams,
    controls: Sequence[MarkovControl],
    N: int,
    seed: int,
    paths: int,
    *,
    t0: float = 0.0,
    x_init: Optional[float] = None,
    workers: int = 1,
) -> list[np.ndarray]:
    """Per-path realized cost ``beta X(T)^2 + int phi`` for each control.

    All controls see the same noise (common random numbers).
    """
    validate(p, strict=False)
    _check_steps(N)
    if paths < 1:
        raise ValueError("paths must be >= 1")
    times = _time_grid(p, N, t0)
    dt = times[1] - times[0]
    chunks = [range(s, min(s + CHUNK, paths)) for s in range(0, paths, CHUNK)]

    def work(ids):
        dB1, _ = brownian_increments(seed, ids, N, dt, with_b2=False)
        return [_run(p, c, times, dB1, None, pnl=False, x_init=x_init)["cost"] for c in controls]

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    return [np.concatenate([r[k] for r in results]) for k in range(len(controls))]


def nested_increments(seed: int, N_fine: int, T: float, factor: int):
    """Noise source for ``simulate_batch`` that aggregates a fine grid by ``factor``."""
    dt = T / N_fine

    def source(ids):
        dB1, dB2 = brownian_increments(seed, ids, N_fine, dt)
        return coarsen(dB1, factor), coarsen(dB2, factor)

    return source


# ---------------------------------------------------------------------------
# serialization


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_paths_csv(fh, paths, with_id: bool = True) -> None:
    """Write paths in long format; ``paths`` is a mapping id -> SimPath or a list."""
    items = paths.items() if isinstance(paths, dict) else enumerate(paths)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow((("path",) if with_id else ()) + CSV_COLUMNS)
    for pid, sp in items:
        Y = sp.Y if sp.Y is not None else np.full(sp.times.shape, np.nan)
        cols = (sp.times, sp.X, sp.S, sp.S_tilde, sp.v, sp.Pi0_direct, sp.Pi0_closed, Y)
        for row in zip(*cols):
            w.writerow(((str(pid),) if with_id else ()) + tuple(_fmt(float(c)) for c in row))
