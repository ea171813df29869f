"""Dataset augmentation with a small conditional latent diffusion model whose
text conditionings are built by mixing caption embeddings within a class."""

__version__ = "0.1.0"
