"""Convolutionless non-Markovian quantum state diffusion and exact QBM master equations."""

__version__ = "0.1.0"
