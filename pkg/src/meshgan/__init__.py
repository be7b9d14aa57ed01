"""Mesh-based 3D-aware GAN toolkit: radial-field geometry, a differentiable
blurred-triangle renderer, WGAN-GP and encoder training, per-image inversion
and a synthetic verification harness."""

__version__ = "0.1.0"
