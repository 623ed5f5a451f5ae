"""Attention-integrated convolutional residual network for ECG parameter regression."""

__version__ = "0.1.0"
