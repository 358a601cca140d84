"""PARADIS: physically-inspired advection, reaction and diffusion on the sphere."""

__version__ = "0.1.0"
