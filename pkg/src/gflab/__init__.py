"""Simulation and verification toolkit for convex gradient fields on the periodic lattice."""
from .lattice import Lattice
from .potentials import CustomPotential, DipolePotential, GaussianPotential
from .dynamics import SdeConfig, run_chain

__version__ = "0.1.0"

__all__ = ["Lattice", "GaussianPotential", "DipolePotential", "CustomPotential", "SdeConfig", "run_chain"]
