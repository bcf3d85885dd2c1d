"""Semi-dense multi-view depth estimation fused with dense single-view priors."""

__version__ = "0.1.0"
