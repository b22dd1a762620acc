"""Contrastive text/mel pretraining and a non-autoregressive TTS pipeline on numpy."""

__version__ = "0.1.0"
