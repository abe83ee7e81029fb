"""Two-stage product image-sequence generation with a multi-modal sequence classifier."""

__version__ = "0.1.0"
