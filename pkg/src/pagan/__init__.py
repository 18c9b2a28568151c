"""Pairwise augmented GAN with its own numpy autodiff engine."""

__version__ = "0.1.0"
