"""Version information for textkd-slu."""

__version__ = "0.1.0"
