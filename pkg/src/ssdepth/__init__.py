"""Semi-supervised monocular depth estimation with disjoint masked attention."""

__version__ = "0.1.0"
