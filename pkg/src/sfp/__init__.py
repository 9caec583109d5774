"""Spurious-feature-targeted pruning and a linear-subspace model of biased training."""

from .errors import SfpError

__version__ = "0.1.0"
__all__ = ["SfpError", "__version__"]
