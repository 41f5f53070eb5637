"""Self-discovery learning for frame-level sequence classification."""

__version__ = "0.1.0"
