"""Multislice X-ray tomography: forward model, adjoint gradients and reconstruction."""

__version__ = "0.1.0"
