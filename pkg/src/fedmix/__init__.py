"""Federated personalized diffusion on a two-component Gaussian mixture.

Clients share the component mean (the backbone) and each owns a scalar
mixing-weight logit (the embedding); both are trained by gradient descent on
the DDPM loss.
"""

__version__ = "0.1.0"
