"""HRTF individualization from anthropometry via latent prototypes."""

__version__ = "0.1.0"
