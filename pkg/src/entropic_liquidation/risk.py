"""Entropic risk estimation, exact axiom checks on finite trees, and Monte Carlo
evaluation of the risk-adjusted objective through its exponential representation.

For a Markov control the objective is

    J(t, x) = -(1/lambda2) ln E[exp(lambda2 (beta X(T)^2 + int_t^T phi(X, v) ds))]

and reduces to the plain mean of -(beta X(T)^2 + int phi) at lambda2 = 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from . import closed_form, dynamics
from .costs import running_cost
from .errors import AxiomViolation, ExponentOverflow, NonFinite
from .params import ModelParams, validate

DEFAULT_LEVEL = 0.99
# Largest admissible spread of the stabilized exponents before the estimate is
# considered dominated by a handful of tail samples.
EXPONENT_SPREAD_BOUND = 700.0


def z_value(level: float) -> float:
    return NormalDist().inv_cdf(0.5 + 0.5 * level)


@dataclass(frozen=True)
class RiskEstimate:
    estimate: float
    stderr: float
    halfwidth: float
    level: float
    n: int
    shift: float
    max_exponent: float
    max_weight: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# log-mean-exp


def log_mean_exp(y, shift: bool = True) -> float:
    """log(mean(exp(y))), stabilized by subtracting max(y) when ``shift``."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("empty sample")
    if not shift:
        return float(np.log(np.mean(np.exp(y))))
    m = float(np.max(y))
    # expm1/log1p keep full precision when all exponents sit near the max
    return m + float(np.log1p(np.mean(np.expm1(y - m))))


def _certainty_equivalent(values: np.ndarray, lam: float, level: float, bound: float) -> RiskEstimate:
    """(1/lam) ln E[exp(lam V)] with a delta-method standard error.

    Evaluated as ``V_max + log1p(mean(expm1(lam (V - V_max)))) / lam`` so that a
    constant sample returns that constant exactly and a shift of the sample
    moves the result by the same amount.
    """
    n = values.size
    vmax = float(np.max(values))
    d = lam * (values - vmax)
    spread = -float(np.min(d))
    if spread > bound:
        raise ExponentOverflow(f"exponent spread {spread:.3g} exceeds bound {bound:.3g}")
    degenerate = bool(spread == 0.0)
    if degenerate:
        return RiskEstimate(vmax, 0.0, 0.0, level, n, vmax, 0.0, 1.0 / n, True)
    e = np.exp(d)
    est = vmax + float(np.log1p(np.mean(np.expm1(d)))) / lam
    se = float(np.std(e, ddof=1)) / (math.sqrt(n) * float(np.mean(e)) * lam)
    return RiskEstimate(
        estimate=est, stderr=se, halfwidth=z_value(level) * se, level=level, n=n,
        shift=vmax, max_exponent=spread, max_weight=float(1.0 / np.sum(e)), degenerate=False,
    )


def _negate(r: RiskEstimate) -> RiskEstimate:
    return RiskEstimate(
        estimate=-r.estimate, stderr=r.stderr, halfwidth=r.halfwidth, level=r.level, n=r.n,
        shift=r.shift, max_exponent=r.max_exponent, max_weight=r.max_weight, degenerate=r.degenerate,
    )


def entropic_risk(samples, lambda2: float, level: float = DEFAULT_LEVEL) -> RiskEstimate:
    """(1/lambda2) ln E[exp(-lambda2 xi)] from samples of xi.

    A constant sample is flagged ``degenerate`` (zero standard error), not rejected.
    """
    xi = np.asarray(samples, dtype=float).ravel()
    if not lambda2 > 0:
        raise ValueError("lambda2 must be > 0")
    if xi.size < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(xi)):
        raise NonFinite("non-finite sample")
    return _certainty_equivalent(-xi, lambda2, level, math.inf)


def mean_estimate(samples, level: float = DEFAULT_LEVEL) -> RiskEstimate:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    se = float(np.std(x, ddof=1) / math.sqrt(x.size))
    return RiskEstimate(
        estimate=float(np.mean(x)), stderr=se, halfwidth=z_value(level) * se, level=level,
        n=x.size, shift=0.0, max_exponent=0.0, max_weight=1.0 / x.size, degenerate=se == 0.0,
    )


# ---------------------------------------------------------------------------
# axioms on finite trees


@dataclass(frozen=True)
class Tree:
    """Two-period tree: ``p[j]`` is the probability of first-period node j and
    ``q[j][k]`` the conditional probability of leaf k below node j."""

    name: str
    p: tuple[float, ...]
    q: tuple[tuple[float, ...], ...]

    @property
    def leaf_probs(self) -> np.ndarray:
        return np.concatenate([pj * np.asarray(qj) for pj, qj in zip(self.p, self.q)])

    def split(self, xi: np.ndarray) -> list[np.ndarray]:
        out, i = [], 0
        for qj in self.q:
            out.append(xi[i : i + len(qj)])
            i += len(qj)
        return out

    @property
    def size(self) -> int:
        return sum(len(qj) for qj in self.q)


def _lme_weighted(y: np.ndarray, w: np.ndarray) -> float:
    m = float(np.max(y))
    return m + math.log(float(np.sum(w * np.exp(y - m))))


def tree_risk(tree: Tree, xi, lambda2: float) -> float:
    """Unconditional entropic risk of leaf payoff ``xi``."""
    xi = np.asarray(xi, dtype=float)
    return _lme_weighted(-lambda2 * xi, tree.leaf_probs) / lambda2


def tree_conditional_risk(tree: Tree, xi, lambda2: float) -> np.ndarray:
    """Entropic risk conditional on each first-period node."""
    xi = np.asarray(xi, dtype=float)
    return np.array(
        [_lme_weighted(-lambda2 * x, np.asarray(q)) / lambda2 for x, q in zip(tree.split(xi), tree.q)]
    )


def tree_node_risk(tree: Tree, values, lambda2: float) -> float:
    """Entropic risk of a variable measurable at the first period."""
    return _lme_weighted(-lambda2 * np.asarray(values, dtype=float), np.asarray(tree.p)) / lambda2


@dataclass(frozen=True)
class AxiomCheck:
    axiom: str
    scenario: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


@dataclass
class AxiomReport:
    lambda2: float
    checks: list[AxiomCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "lambda2": self.lambda2,
            "passed": self.passed,
            "checks": [dict(asdict(c), passed=c.passed) for c in self.checks],
        }


def _ulps(*values: float) -> float:
    # the only slack allowed is floating-point rounding of the operands
    return 64.0 * np.finfo(float).eps * max(1.0, *(abs(v) for v in values))


def default_battery(seed: int = 7, count: int = 6) -> list[tuple[Tree, np.ndarray, np.ndarray]]:
    """Small trees with pairs of leaf payoffs; includes a two-point coin tree."""
    rng = np.random.default_rng(seed)
    out = [(Tree("coin", (0.5, 0.5), ((1.0,), (1.0,))), np.array([0.0, 1.0]), np.array([1.0, -0.5]))]
    for k in range(count):
        n1 = int(rng.integers(2, 4))
        p = rng.dirichlet(np.ones(n1))
        q = tuple(tuple(rng.dirichlet(np.ones(int(rng.integers(2, 4))))) for _ in range(n1))
        tree = Tree(f"random{k}", tuple(p), q)
        xi1 = rng.normal(0.0, 1.0 + k, tree.size)
        xi2 = rng.normal(0.5, 2.0, tree.size)
        out.append((tree, xi1, xi2))
    return out


def axiom_suite(lambda2: float, battery: Optional[Sequence] = None, raise_on_failure: bool = True) -> AxiomReport:
    """Convexity, monotonicity, translation and semigroup checks, computed exactly.

    Translation uses the sign the entropic measure satisfies,
    R(xi + c) = R(xi) - c; the semigroup identity is R(0, -R(tau, xi)) = R(0, xi).
    """
    if not lambda2 > 0:
        raise ValueError("lambda2 must be > 0")
    battery = default_battery() if battery is None else battery
    rep = AxiomReport(lambda2)
    for tree, xi1, xi2 in battery:
        R = lambda x: tree_risk(tree, x, lambda2)
        r1, r2 = R(xi1), R(xi2)

        worst, tol = -math.inf, 0.0
        for alpha in np.linspace(0.0, 1.0, 11):
            lhs = R(alpha * xi1 + (1 - alpha) * xi2)
            rhs = alpha * r1 + (1 - alpha) * r2
            worst = max(worst, lhs - rhs)
            tol = max(tol, _ulps(lhs, rhs, r1, r2))
        rep.checks.append(AxiomCheck("convexity", tree.name, worst, tol))

        bumped = np.maximum(xi1, xi2)
        lhs, rhs = R(bumped), min(r1, r2)
        rep.checks.append(AxiomCheck("monotonicity", tree.name, lhs - rhs, _ulps(lhs, rhs)))

        worst, tol = 0.0, 0.0
        for c in (-3.0, -0.25, 0.5, 1.0, 10.0):
            lhs = R(xi1 + c)
            worst = max(worst, abs(lhs - (r1 - c)))
            tol = max(tol, _ulps(lhs, r1, c))
        rep.checks.append(AxiomCheck("translation", tree.name, worst, tol))

        inner = tree_conditional_risk(tree, xi1, lambda2)
        lhs = tree_node_risk(tree, -inner, lambda2)
        rep.checks.append(AxiomCheck("semigroup", tree.name, abs(lhs - r1), _ulps(lhs, r1, *inner)))

    if raise_on_failure:
        for c in rep.checks:
            if not c.passed:
                raise AxiomViolation(c.axiom, c.scenario, f"violation {c.worst:.3g} > {c.tolerance:.3g}")
    return rep


# ---------------------------------------------------------------------------
# objective functional


@dataclass(frozen=True)
class CostFunctional:
    """Running cost phi(x, v) and terminal cost beta x^2."""

    params: ModelParams

    def running(self, x, v):
        return running_cost(self.params, x, v)

    def terminal(self, x):
        return self.params.beta * np.asarray(x, dtype=float) ** 2


def objective_from_costs(
    p: ModelParams, costs: np.ndarray, level: float = DEFAULT_LEVEL, bound: float = EXPONENT_SPREAD_BOUND
) -> RiskEstimate:
    """J from realized costs: -(1/lambda2) ln mean exp(lambda2 C), or -mean(C) at lambda2 = 0."""
    costs = np.asarray(costs, dtype=float).ravel()
    if not np.all(np.isfinite(costs)):
        raise NonFinite("non-finite realized cost")
    if costs.size == 1:
        c = float(costs[0])
        return RiskEstimate(-c, 0.0, 0.0, level, 1, c, 0.0, 1.0, True)
    if p.lambda2 == 0.0:
        return mean_estimate(-costs, level)
    return _negate(_certainty_equivalent(costs, p.lambda2, level, bound))


def objective_estimate(
    p: ModelParams,
    ctrl: Optional[dynamics.MarkovControl],
    t: float,
    x: float,
    paths: int,
    N: int,
    seed: int,
    level: float = DEFAULT_LEVEL,
    workers: int = 1,
) -> RiskEstimate:
    """Monte Carlo estimate of J(t, x) under ``ctrl`` (optimal feedback if None)."""
    validate(p)
    ctrl = dynamics.optimal_control(p) if ctrl is None else ctrl
    (costs,) = dynamics.simulate_costs(p, [ctrl], N, seed, paths, t0=t, x_init=x, workers=workers)
    return objective_from_costs(p, costs, level)


@dataclass(frozen=True)
class ScanRow:
    tag: str
    J: float
    stderr: float
    halfwidth: float
    gap: float
    gap_stderr: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScanTable:
    """Scan rows plus per-path linearized contributions for paired comparisons."""

    w: float
    rows: list[ScanRow]
    influence: list[np.ndarray]

    def diff_stderr(self, i: int, j: int) -> float:
        """Standard error of J_i - J_j under common noise."""
        d = self.influence[i] - self.influence[j]
        return float(np.std(d, ddof=1) / math.sqrt(d.size))

    def to_dict(self) -> dict:
        return {"w": self.w, "rows": [r.to_dict() for r in self.rows]}


def standard_family(p: ModelParams, eps: Sequence[float] = (0.05, 0.1, 0.2)) -> list[dynamics.MarkovControl]:
    """v*, (1 +/- eps) v* for each eps, and v* + 0.1 v_bar."""
    fam = [dynamics.optimal_control(p)]
    for e in eps:
        fam += [dynamics.scaled_control(p, e), dynamics.scaled_control(p, -e)]
    fam.append(dynamics.shifted_control(p, 0.1 * p.v_bar))
    return fam


def suboptimality_scan(
    p: ModelParams,
    controls: Sequence[dynamics.MarkovControl],
    t: float,
    x: float,
    paths: int,
    N: int,
    seed: int,
    level: float = DEFAULT_LEVEL,
    workers: int = 1,
) -> ScanTable:
    """Estimate J for each control on common noise; ``gap = w(t, x) - J``.

    ``gap_stderr`` is the paired standard error against the first control.
    """
    validate(p)
    w = closed_form.value_function(p, t, x)
    all_costs = dynamics.simulate_costs(p, controls, N, seed, paths, t0=t, x_init=x, workers=workers)
    influence = [_influence(p, c) for c in all_costs]
    rows = []
    for k, (ctrl, c) in enumerate(zip(controls, all_costs)):
        est = objective_from_costs(p, c, level)
        d = influence[k] - influence[0]
        gse = float(np.std(d, ddof=1) / math.sqrt(d.size))
        rows.append(ScanRow(ctrl.tag, est.estimate, est.stderr, est.halfwidth, w - est.estimate, gse))
    return ScanTable(w=w, rows=rows, influence=influence)


def _influence(p: ModelParams, costs: np.ndarray) -> np.ndarray:
    """Per-path first-order contribution to the J estimate."""
    if p.lambda2 == 0.0:
        return -costs
    y = p.lambda2 * costs
    e = np.exp(y - np.max(y))
    return -e / (p.lambda2 * np.mean(e))


def write_scan_csv(fh, table: ScanTable) -> None:
    fh.write("tag,J,stderr,gap,halfwidth\n")
    for r in table.rows:
        fh.write(f"{r.tag},{r.J:.17g},{r.stderr:.17g},{r.gap:.17g},{r.halfwidth:.17g}\n")
