"""Linear equivalent-circuit state estimation with Monte Carlo uncertainty propagation."""

__version__ = "0.1.0"
