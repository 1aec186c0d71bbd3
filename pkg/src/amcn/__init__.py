"""Attention-based convolutional downscaling of satellite precipitation."""
__version__ = "0.1.0"
