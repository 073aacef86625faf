"""Low-precision stochastic gradient Langevin dynamics."""

__version__ = "0.1.0"
