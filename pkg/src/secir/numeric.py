"""Fixed-point number field and admissible share-magnitude range.

Every value handled by the protocols is a real number carried in an IEEE-754
double, interpreted as a fixed-point quantity with ``frac_bits`` fractional
bits.  Shares transmitted between parties are expected to stay inside the
open magnitude window ``(2^(delta-frac_bits), 2^(epsilon-frac_bits))`` or be
exactly zero; that window is referred to as the share range below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CARRIER_PRECISION_BITS = 53  # float64 mantissa


@dataclass(frozen=True)
class FixedPointConfig:
    """Bit-layout of the fixed-point field plus the share-range exponents."""

    int_bits: int = 12
    frac_bits: int = 16
    delta: int = 8
    epsilon: int = 24
    eta: float = 2.0 ** -8
    # When true, channel payloads are truncated to the frac_bits grid before
    # every send.  Off by default: the acceptance tolerances (1e-6 scale)
    # require full-carrier wires; see the test suite for truncated sessions.
    truncate_wire: bool = False

    def __post_init__(self):
        if self.delta < self.frac_bits / 2:
            raise ValueError("delta must be at least frac_bits/2")
        # Products of two maximal in-range shares must stay below the
        # admissible product bound 2^(int_bits/2 + frac_bits).
        if 2 * (self.epsilon - self.frac_bits) > self.int_bits / 2 + self.frac_bits:
            raise ValueError("share products would exceed the admissible bound")
        if self.int_bits + 2 * self.frac_bits + 8 > CARRIER_PRECISION_BITS:
            raise ValueError("share products would not fit the carrier type")
        if not (0.0 < self.eta < 2.0 ** -4):
            raise ValueError("eta must be in (0, 2^-4)")

    @property
    def resolution(self) -> float:
        """Grid step of the fixed-point field, 2^-frac_bits."""
        return 2.0 ** -self.frac_bits

    @property
    def share_lo(self) -> float:
        """Lower magnitude bound (exclusive) of the share range."""
        return 2.0 ** (self.delta - self.frac_bits)

    @property
    def share_hi(self) -> float:
        """Upper magnitude bound (exclusive) of the share range."""
        return 2.0 ** (self.epsilon - self.frac_bits)

    @property
    def secret_hi(self) -> float:
        """Largest secret magnitude accepted for splitting."""
        return 2.0 ** (self.epsilon - self.frac_bits - 1)


DEFAULT_CONFIG = FixedPointConfig()


def truncate(x, cfg: FixedPointConfig = DEFAULT_CONFIG):
    """Reduce the fractional part of ``x`` to ``cfg.frac_bits`` bits.

    Floors on the scaled integer, so the result never exceeds the input and
    differs from it by less than one grid step.  Accepts scalars and arrays.
    """
    scale = 2.0 ** cfg.frac_bits
    if isinstance(x, np.ndarray):
        return np.floor(x * scale) / scale
    return math.floor(x * scale) / scale


def is_on_grid(x, cfg: FixedPointConfig = DEFAULT_CONFIG) -> bool:
    """True when ``x * 2^frac_bits`` is integral for every element."""
    scaled = np.asarray(x, dtype=np.float64) * 2.0 ** cfg.frac_bits
    return bool(np.all(scaled == np.floor(scaled)))


def in_share_range(x, cfg: FixedPointConfig = DEFAULT_CONFIG):
    """Membership test for the share range (zero is always admissible).

    Returns a bool for scalars and a boolean array elementwise otherwise.
    """
    a = np.abs(np.asarray(x, dtype=np.float64))
    ok = (a == 0.0) | ((a > cfg.share_lo) & (a < cfg.share_hi))
    if np.isscalar(x) or getattr(x, "ndim", 0) == 0:
        return bool(ok)
    return ok
