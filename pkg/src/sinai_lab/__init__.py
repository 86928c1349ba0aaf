"""Random walks in random environments: exact quenched computations, valley
analysis of the potential, couplings and Monte Carlo meeting statistics."""

__version__ = "0.1.0"
