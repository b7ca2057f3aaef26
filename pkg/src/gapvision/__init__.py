"""Glimpse-based active perception: saliency-driven glimpses feeding relational heads."""

__version__ = "0.1.0"
