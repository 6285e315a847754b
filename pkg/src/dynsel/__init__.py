"""Uncertainty-driven dynamic member selection for evidential BatchEnsemble networks."""

__version__ = "0.1.0"
