"""Coupled signal/logit diffusion for robust classification with a frozen classifier."""

__version__ = "0.1.0"
