"""Property-aware VAE with a learned correlation mask and an invertible
property head that supports constrained generation."""

__version__ = "0.1.0"
