"""Trajectory-level VAE with consistent state and policy decoders, latent MPC and entropy-driven exploration."""

__version__ = "0.1.0"
