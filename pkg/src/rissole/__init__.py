"""Block-wise retrieval-conditioned latent diffusion, small enough for a laptop."""

__version__ = "0.1.0"
