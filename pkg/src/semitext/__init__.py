"""Semi-supervised short-text clustering toolkit."""

__version__ = "0.1.0"
