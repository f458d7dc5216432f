"""Dynamic/static decomposition and 4D hash deformation for Gaussian splatting."""

__version__ = "0.1.0"
