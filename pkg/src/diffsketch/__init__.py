"""Sketch extraction from diffusion features: selection, generator, training and distillation."""

__version__ = "0.1.0"
