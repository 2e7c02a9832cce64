"""Multi-scale temporal activity detection on per-frame feature sequences."""

__version__ = "0.1.0"
