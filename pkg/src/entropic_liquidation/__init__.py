"""Optimal liquidation under entropic risk with uncertain order fills."""

from .params import ModelParams, illustration_params, validate

__version__ = "0.1.0"

__all__ = ["ModelParams", "illustration_params", "validate", "__version__"]
