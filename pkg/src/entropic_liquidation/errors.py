"""Exception types shared across the package."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Violation:
    field: str
    constraint: str

    def __str__(self) -> str:
        return f"{self.field}: {self.constraint}"


class InadmissibleParams(ValueError):
    """Raised when a parameter set violates one or more admissibility constraints.

    Every violated constraint is collected in ``violations``.
    """

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("inadmissible parameters: " + "; ".join(map(str, self.violations)))


class OutOfRange(ValueError):
    pass


class DegenerateRegime(ValueError):
    pass


class GridError(ValueError):
    pass


class BlowUp(ArithmeticError):
    pass


class NonFinite(ArithmeticError):
    pass


class ExponentOverflow(ArithmeticError):
    """Stabilized exponent spread too wide for a reliable exponential average."""


class AxiomViolation(AssertionError):
    def __init__(self, axiom: str, scenario: str, detail: str = ""):
        self.axiom = axiom
        self.scenario = scenario
        msg = f"{axiom} violated on scenario {scenario!r}"
        super().__init__(msg + (f": {detail}" if detail else ""))


class ConfigError(ValueError):
    pass
