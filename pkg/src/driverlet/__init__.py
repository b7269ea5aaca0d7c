"""Record gold-driver/device interactions as templates and replay them."""

__version__ = "0.1.0"
