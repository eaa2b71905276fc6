"""Causal adversarial networks: SCM-embedded WGAN-GP generators for labels and images."""

__version__ = "0.1.0"
