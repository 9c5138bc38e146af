"""Cluster-aware generative model: two-layer VAE with a discrete cluster
latent, semi-supervised training objective, importance-weighted evaluation
and latent diagnostics."""

from .model import CaGeM, ModelConfig, VAE, build_model  # noqa: F401

__version__ = "0.1.0"
