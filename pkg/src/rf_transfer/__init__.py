"""Training-free appearance transfer on a toy rectified-flow diffusion transformer."""

__version__ = "0.1.0"
