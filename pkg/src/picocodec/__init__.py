"""Tiled learned image codec: models, integer scale decoder, entropy coding,
architecture filtering and evaluation metrics."""

__version__ = "0.1.0"
