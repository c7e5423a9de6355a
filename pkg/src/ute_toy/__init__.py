"""Desk-scale glyph- and position-conditioned latent diffusion for scene-text editing."""

__version__ = "0.1.0"
