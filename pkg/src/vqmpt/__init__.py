"""Vector-quantized motion planning transformers for a 2D point robot."""

__version__ = "0.1.0"
