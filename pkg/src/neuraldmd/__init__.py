"""Sparse spatio-temporal field reconstruction with neural modes and a constrained linear spectrum."""

__version__ = "0.1.0"
