"""Desk-scale federated learning test harness."""

__version__ = "0.1.0"
