"""Kernelized inverse optimization for EV-fleet power forecasting and bidding."""

__version__ = "0.1.0"
