"""Type-aware link prediction for Open Knowledge Graphs."""

__version__ = "0.1.0"
