"""Multi-chart flows: density estimation on manifolds learned from data."""

__version__ = "0.1.0"
