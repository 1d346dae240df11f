"""Goal-reaching policies from backward rollouts of a discrete latent world model."""

__version__ = "0.1.0"
