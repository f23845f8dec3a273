"""Variational latent-gated fusion of multi-scale convolutional features.

Supervised and episodic few-shot harnesses built around a small VAE whose
latent draws softmax-gate pooled backbone features.
"""

__version__ = "0.1.0"
