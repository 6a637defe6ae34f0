"""Agent-attention fusion of visual, reference and location-semantic token streams."""

__version__ = "0.1.0"
