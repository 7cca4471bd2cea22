"""Stratum corneum segmentation, superpixel patches and capsule-based neutrophil detection."""

__version__ = "0.1.0"
