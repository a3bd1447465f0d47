"""Contrastive alignment of scene graphs and images with two Transformer towers."""

__version__ = "0.1.0"
