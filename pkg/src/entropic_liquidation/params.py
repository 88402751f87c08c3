"""Model parameters, admissibility checks and derived constants."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .errors import InadmissibleParams, Violation

# Below this value of kappa * lambda2 the risk-neutral formulas are used.
RHO_ZERO = 1e-14


@dataclass(frozen=True)
class ModelParams:
    """Market, penalty and risk parameters of the liquidation problem.

    Attributes:
        gamma: permanent impact, price per share.
        eta: temporary impact, price per (share/time).
        sigma: fair-price volatility, price per sqrt(time).
        m: order-fill volatility, shares per sqrt(time).
        beta: terminal block-trade penalty.
        lambda1: weight of the running penalty on deviations from ``v_bar``.
        lambda2: entropic risk aversion.
        v_bar: target trading rate, shares per time.
        T: horizon.
        x0: initial position, shares.
        s0: initial fair price.
    """

    gamma: float
    eta: float
    sigma: float
    m: float
    beta: float
    lambda1: float
    lambda2: float
    v_bar: float
    T: float
    x0: float
    s0: float

    @property
    def kappa(self) -> float:
        return 2.0 * self.m**2 * (self.eta + self.lambda1)

    @property
    def rho(self) -> float:
        """Dimensionless risk aversion ``kappa * lambda2``; admissible in [0, 1)."""
        return self.kappa * self.lambda2

    @property
    def derived(self) -> "DerivedConstants":
        return DerivedConstants.of(self)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def with_rho(self, rho: float) -> "ModelParams":
        """Return a copy whose ``lambda2`` gives ``kappa * lambda2 == rho``."""
        if rho == 0.0:
            return self.replace(lambda2=0.0)
        kappa = self.kappa
        if kappa == 0.0:
            raise InadmissibleParams([Violation("lambda2", "rho > 0 requires kappa = 2 m^2 (eta + lambda1) > 0")])
        return self.replace(lambda2=rho / kappa)

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class DerivedConstants:
    kappa: float
    v_bar_ell: float
    rate_arg: float

    @classmethod
    def of(cls, p: ModelParams) -> "DerivedConstants":
        kappa = p.kappa
        return cls(
            kappa=kappa,
            v_bar_ell=p.lambda1 * p.v_bar / (p.eta + p.lambda1),
            rate_arg=p.gamma * math.sqrt(kappa * p.lambda2) / (2.0 * (p.eta + p.lambda1)),
        )


_FIELDS = [f.name for f in dataclasses.fields(ModelParams)]


def _check(p: ModelParams, strict: bool = True) -> list[Violation]:
    out: list[Violation] = []
    for name in _FIELDS:
        value = getattr(p, name)
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            out.append(Violation(name, "must be a finite number"))
    if out:
        return out
    if p.gamma < 0:
        out.append(Violation("gamma", "gamma >= 0"))
    if strict:
        if p.eta <= 0:
            out.append(Violation("eta", "eta > 0"))
        if p.sigma <= 0:
            out.append(Violation("sigma", "sigma > 0"))
    else:
        if p.eta < 0:
            out.append(Violation("eta", "eta >= 0"))
        if p.sigma < 0:
            out.append(Violation("sigma", "sigma >= 0"))
        if not p.eta + p.lambda1 > 0:
            out.append(Violation("eta", "eta + lambda1 > 0"))
    if p.m < 0:
        out.append(Violation("m", "m >= 0"))
    if p.beta <= 0:
        out.append(Violation("beta", "beta > 0"))
    if p.lambda1 < 0:
        out.append(Violation("lambda1", "lambda1 >= 0"))
    if p.lambda2 < 0:
        out.append(Violation("lambda2", "lambda2 >= 0"))
    if p.v_bar <= 0:
        out.append(Violation("v_bar", "v_bar > 0"))
    if p.T <= 0:
        out.append(Violation("T", "T > 0"))
    if p.s0 <= 0:
        out.append(Violation("s0", "s0 > 0"))
    if not p.beta - p.gamma / 2.0 > 0:
        out.append(Violation("beta", "beta > gamma/2"))
    if p.eta + p.lambda1 > 0 and not p.kappa * p.lambda2 < 1.0:
        out.append(Violation("lambda2", "lambda2 < 1/kappa"))
    return out


def validate(p: ModelParams, strict: bool = True) -> ModelParams:
    """Check every admissibility constraint; raise with all violations at once.

    ``strict=False`` admits the frictionless and noiseless limits
    ``eta = 0`` and ``sigma = 0`` (with ``eta + lambda1 > 0`` so the policy
    stays defined); the simulators accept these for degenerate test cases.
    """
    violations = _check(p, strict)
    if violations:
        raise InadmissibleParams(violations)
    return p


def illustration_params(rho: float = 0.0, **overrides) -> ModelParams:
    """The numerical illustration parameter set, with risk aversion given as rho.

    ``sigma`` and ``s0`` do not enter the optimal policy and are not part of the
    original parameter block; the defaults here are placeholders.
    """
    eta = 25e-6
    base = ModelParams(
        gamma=2.5e-7,
        eta=eta,
        sigma=0.5,
        m=0.2e7,
        beta=100 * eta,
        lambda1=1e-4,
        lambda2=0.0,
        v_bar=1.0,
        T=5.0,
        x0=1e6,
        s0=50.0,
    )
    base = base.replace(**overrides)
    return validate(base.with_rho(rho))
