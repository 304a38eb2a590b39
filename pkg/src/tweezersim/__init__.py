"""Monte Carlo simulation and analysis of single-atom imaging in optical tweezer arrays."""

__version__ = "0.1.0"
