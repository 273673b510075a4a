"""Desk-scale laboratory for adversarial perturbations and foveated inference."""

__version__ = "0.1.0"
