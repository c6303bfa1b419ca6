"""Port-Hamiltonian regularized world models with energy-constrained control."""

__version__ = "0.1.0"
