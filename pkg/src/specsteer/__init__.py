"""Speculative what-if sandboxes for steering an incremental topic model."""

__version__ = "0.1.0"
