"""3D-aware portrait video generation with a temporal tri-plane GAN."""

__version__ = "0.1.0"
