"""Stripe-dropping re-identification at desk scale.

A small dense-tensor engine with reverse-mode differentiation, a
three-stream embedding network that zeroes the most activated horizontal
stripes of its feature maps during training, a deterministic synthetic
re-identification benchmark, and a retrieval evaluation suite with
k-reciprocal re-ranking.
"""

__version__ = "0.1.0"
