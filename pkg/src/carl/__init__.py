"""Continuous-label contrastive learning with perturbed-token detection.

A small numpy autodiff core, a byte-level transformer encoder, the momentum
contrastive objective, the token attack/detection objective, a trainer and
an evaluation suite.
"""

from .errors import CarlError

__all__ = ["CarlError", "__version__"]
__version__ = "0.1.0"
