"""Mixed constraint energy minimizing multiscale method for parabolic Darcy flow."""

__version__ = "0.1.0"
