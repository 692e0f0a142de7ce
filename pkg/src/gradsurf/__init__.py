"""Numerical laboratory for gradient interface models on the torus."""

from .lattice import EdgeField, LatticeField, Torus, build_torus
from .potential import make_potential

__all__ = ["EdgeField", "LatticeField", "Torus", "build_torus", "make_potential"]
