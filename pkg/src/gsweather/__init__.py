"""Dynamic weather effects for static Gaussian-splat scenes."""

__version__ = "0.1.0"
