"""Deep regionlet feature extraction with hand-derived gradients."""

__version__ = "0.1.0"
