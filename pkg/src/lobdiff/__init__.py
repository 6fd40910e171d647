"""Limit order book simulation on a Haar basis: micro dynamics, coefficients and the limit SDE."""

__version__ = "0.1.0"
