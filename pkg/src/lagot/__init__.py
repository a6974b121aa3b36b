"""Optimal transport maps and least-action paths under Lagrangian costs."""

__version__ = "0.1.0"
