"""Desk-scale lab for privacy-preserving video pre-training.

Procedural toy-video worlds with controllable background bias, a numpy video
transformer with reverse-mode autodiff, masked-autoencoder pre-training,
supervised label alignment over mixed data sources, a fine-tune/linear-probe
evaluation harness, and weight-space model mixing with a learned ratio.
"""

from ppma.backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
