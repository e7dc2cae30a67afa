"""Recommendation with private-attribute protection via adversarial training."""

__version__ = "0.1.0"
