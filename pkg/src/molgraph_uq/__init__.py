"""Bayesian graph convolutional networks with MC-dropout uncertainty for molecules."""

__version__ = "0.1.0"

from .errors import MolGraphUQError  # noqa: F401
