"""Stochastic Benders decomposition for two-stage network design."""
__version__ = "0.1.0"
