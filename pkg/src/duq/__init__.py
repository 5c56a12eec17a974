"""Dense uncertainty estimation with an ensemble latent variable model, in pure numpy."""

__version__ = "0.1.0"
