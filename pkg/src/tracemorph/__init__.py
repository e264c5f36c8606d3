"""Traceable diffusion-based image translation with diffeomorphic deformations."""

__version__ = "0.1.0"
