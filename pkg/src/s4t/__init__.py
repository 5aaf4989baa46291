"""Desk-scale lab for synchronized multi-task test-time training."""

__version__ = "0.1.0"
