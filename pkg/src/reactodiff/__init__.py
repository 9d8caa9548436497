"""Finite-difference solvers for reaction-diffusion equations with polynomial reactions."""
__version__ = "0.1.0"
