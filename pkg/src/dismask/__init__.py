"""Disentangled GAN training with masked latent modulation.

Subpackages: gating (structured gate math), netcore (networks and gradient
checking), losses, data, train, metrics, checkpoint, cli.
"""

__version__ = "0.1.0"
