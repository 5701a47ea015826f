"""Latent action model and segment-masked vision-language-action policy on a toy block world."""

__version__ = "0.1.0"
