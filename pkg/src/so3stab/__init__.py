"""Spherical convolutions on SO(3), forward Spherical CNNs, and measured
equivariance / diffeomorphism-stability checks."""

__version__ = "0.1.0"
