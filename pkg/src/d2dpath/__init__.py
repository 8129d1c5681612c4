"""Diffusion-path prediction with a top-down tree LSTM over user prototypes."""

__version__ = "0.1.0"
