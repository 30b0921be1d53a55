"""Heterogeneous graph contrastive learning with meta-path contexts and
weighted negative samples (MEOW and AdaMEOW)."""

__version__ = "0.1.0"
