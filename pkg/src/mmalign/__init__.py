"""Contrastive alignment of several material modalities in one latent space."""

__version__ = "0.1.0"
