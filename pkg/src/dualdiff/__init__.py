"""Joint continuous image diffusion and masked text diffusion, desk scale."""

__version__ = "0.1.0"
