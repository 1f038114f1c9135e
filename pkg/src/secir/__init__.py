"""Two-party additive-secret-sharing computation and private retrieval."""

__version__ = "0.1.0"

from .numeric import DEFAULT_CONFIG, FixedPointConfig, in_share_range, truncate
from .sharing import PartyId, Share, reconstruct, split

__all__ = [
    "DEFAULT_CONFIG",
    "FixedPointConfig",
    "PartyId",
    "Share",
    "in_share_range",
    "reconstruct",
    "split",
    "truncate",
]
