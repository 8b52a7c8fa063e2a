"""Desk-scale variational diffusion unlearning on small denoising diffusion models."""

__version__ = "0.1.0"
