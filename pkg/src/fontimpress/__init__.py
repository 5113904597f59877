"""Part-based font shape-to-impression modeling and attribution."""

__version__ = "0.1.0"
