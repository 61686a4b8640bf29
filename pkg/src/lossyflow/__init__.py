"""Interior-point and M-matrix solvers for lossy generalized network flow."""

__version__ = "0.1.0"
