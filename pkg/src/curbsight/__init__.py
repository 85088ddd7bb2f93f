"""Roadside asset perception: panorama detection plus retrieval-grounded attribute extraction."""

__version__ = "0.1.0"
