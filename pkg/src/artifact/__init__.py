"""Numerical toolkit for C^m extension problems on semialgebraic bundles over the plane."""

__version__ = "0.1.0"
