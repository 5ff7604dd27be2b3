"""Bound states of a strip waveguide with a twisted Dirichlet/Neumann window."""

__version__ = "0.1.0"
