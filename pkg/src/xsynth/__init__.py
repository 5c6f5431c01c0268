"""Diffusion-based cross-modality (MRA to CTA) image translation toolkit."""

__version__ = "0.1.0"
