"""Counterfactual time-series forecasting under mixed multi-treatment plans."""

__version__ = "0.1.0"
