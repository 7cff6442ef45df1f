"""Federated learning simulator with multi-stage label-noise correction."""

__version__ = "0.1.0"
