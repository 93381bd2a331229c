"""Desk-scale laboratory for backdoors in diffusion-based purification and
certification."""

from . import attacks, certification, defenses, diffusion, nn, numerics

__version__ = "0.1.0"
__all__ = ["attacks", "certification", "defenses", "diffusion", "nn", "numerics", "__version__"]
