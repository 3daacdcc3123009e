"""Text-anchoring benchmark and data-engine toolkit."""

__version__ = "0.1.0"
