"""Running cost and backward driver of the risk-adjusted objective."""

from __future__ import annotations

from .params import ModelParams


def running_cost(p: ModelParams, x, v):
    """phi(x, v) = (eta + lambda1) v^2 + (gamma x - 2 lambda1 v_bar) v - (gamma m^2 - lambda1 v_bar^2).

    This is the part of the driver that does not depend on the backward
    controls: the negative P&L drift plus the running penalty.
    """
    return (
        (p.eta + p.lambda1) * v * v
        + (p.gamma * x - 2.0 * p.lambda1 * p.v_bar) * v
        - (p.gamma * p.m**2 - p.lambda1 * p.v_bar**2)
    )


def driver(p: ModelParams, x, z1_tilde, z2_tilde, v):
    """Quadratic-growth driver: running cost plus lambda2/2 |Z_tilde|^2."""
    return running_cost(p, x, v) + 0.5 * p.lambda2 * (z1_tilde * z1_tilde + z2_tilde * z2_tilde)
