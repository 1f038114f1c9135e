"""Additive share containers, splitting, reconstruction and share files.

A secret x is held as x = s1 + s2 with party ``P1`` owning s1 and ``P2``
owning s2.  Linear algebra with public operands is local; everything else
goes through the protocols module.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import SameOwner, SecretOutOfRange, ShapeMismatch
from .numeric import DEFAULT_CONFIG, FixedPointConfig, in_share_range, truncate
from .rng import as_rng

SHARE_MAGIC = b"ASSH"
SHARE_VERSION = 1


class PartyId(enum.IntEnum):
    P1 = 1
    P2 = 2

    @property
    def peer(self) -> "PartyId":
        return PartyId.P2 if self is PartyId.P1 else PartyId.P1


@dataclass(frozen=True)
class Share:
    """One party's additive share of a scalar, vector or matrix secret."""

    owner: PartyId
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def shape(self):
        return self.values.shape


def _draw_share_values(shape, cfg: FixedPointConfig, rng, law: str) -> np.ndarray:
    """Random values with uniform sign and in-range magnitude.

    ``log_uniform`` draws the magnitude exponent uniformly over the share
    window; ``exp_normal`` draws it from a normal centred on the window
    midpoint (clipped to stay inside).
    """
    lo = cfg.delta - cfg.frac_bits
    hi = cfg.epsilon - cfg.frac_bits
    if law == "log_uniform":
        exponents = rng.uniform(lo, hi, size=shape)
    elif law == "exp_normal":
        mid = (lo + hi) / 2.0
        exponents = np.clip(rng.normal(mid, (hi - lo) / 6.0, size=shape), lo, hi)
    else:
        raise ValueError(f"unknown share exponent law: {law!r}")
    signs = rng.choice(np.array([-1.0, 1.0]), size=shape)
    return signs * np.exp2(exponents)


def split(secret, rng_seed, cfg: FixedPointConfig = DEFAULT_CONFIG,
          law: str = "log_uniform") -> tuple[Share, Share]:
    """Split a secret scalar/array into two in-range additive shares.

    The P1 share is drawn randomly; the P2 share is the remainder against
    the truncated secret, resampled until it also lands in the share range.
    Raises SecretOutOfRange when the magnitude cap would make that
    impossible to guarantee.
    """
    rng = as_rng(rng_seed)
    sec = np.asarray(secret, dtype=np.float64)
    if np.any(np.abs(sec) > cfg.secret_hi):
        raise SecretOutOfRange(f"|secret| exceeds {cfg.secret_hi}")
    target = truncate(sec if sec.ndim else float(sec), cfg)
    target = np.asarray(target, dtype=np.float64)

    s1 = truncate(_draw_share_values(sec.shape, cfg, rng, law), cfg)
    s2 = target - s1
    for _ in range(256):
        bad = ~np.asarray(in_share_range(s2, cfg), dtype=bool) | ~np.asarray(
            in_share_range(s1, cfg), dtype=bool)
        if not np.any(bad):
            break
        redraw = truncate(_draw_share_values(sec.shape, cfg, rng, law), cfg)
        s1 = np.where(bad, redraw, s1)
        s2 = target - s1
    else:
        raise SecretOutOfRange("could not place both shares in the share range")
    return Share(PartyId.P1, s1), Share(PartyId.P2, s2)


def reconstruct(s1: Share, s2: Share, cfg: FixedPointConfig = DEFAULT_CONFIG):
    """Sum two shares of one logical secret, truncated onto the grid."""
    if s1.owner == s2.owner:
        raise SameOwner("both shares belong to the same party")
    if s1.shape != s2.shape:
        raise ShapeMismatch(f"{s1.shape} vs {s2.shape}")
    total = s1.values + s2.values
    if total.ndim == 0:
        return truncate(float(total), cfg)
    return truncate(total, cfg)


def local_linear(s: Share, A=None, B=None, c: float = 1.0) -> Share:
    """Apply the public map ``A @ s @ B * c`` to one party's share.

    Applying the same map to both parties' shares commutes with
    reconstruction, so no interaction is needed.
    """
    v = s.values
    if A is not None:
        A = np.asarray(A, dtype=np.float64)
        if A.shape[-1] != v.shape[0]:
            raise ShapeMismatch(f"A{A.shape} @ share{v.shape}")
        v = A @ v
    if B is not None:
        B = np.asarray(B, dtype=np.float64)
        if v.shape[-1] != B.shape[0]:
            raise ShapeMismatch(f"share{v.shape} @ B{B.shape}")
        v = v @ B
    return Share(s.owner, v * c)


def normalize_share(value: float, cfg: FixedPointConfig, rng) -> tuple[float, float | None]:
    """Re-range one share before it is transmitted.

    Overflow (|value| at or above the window top) is replaced by a random
    in-range value; the returned correction must be delivered to the peer,
    which adds it to its own share so the logical secret is preserved.
    Underflow is zeroed locally with no message.  Returns
    ``(new_value, correction_or_None)``.
    """
    a = abs(value)
    if a >= cfg.share_hi:
        fresh = float(_draw_share_values((), cfg, as_rng(rng), "log_uniform"))
        return fresh, value - fresh
    if 0.0 < a <= cfg.share_lo:
        return 0.0, None
    return value, None


def apply_share_correction(value: float, correction: float) -> float:
    """Peer-side half of overflow normalization."""
    return value + correction


def write_array(fh, arr) -> None:
    """Array blob: ndim u8, dims u32 each, row-major little-endian f64."""
    v = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<B", v.ndim))
    for dim in v.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(v.tobytes(order="C"))


def read_array(fh) -> np.ndarray:
    ndim, = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    return np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()


def open_share_section(fh, owner: PartyId, tag: bytes) -> None:
    """Common header for share-format files: magic, version, owner, tag."""
    assert len(tag) == 4
    fh.write(SHARE_MAGIC)
    fh.write(struct.pack("<HB", SHARE_VERSION, int(owner)))
    fh.write(tag)


def read_share_header(fh) -> tuple[PartyId, bytes]:
    magic = fh.read(4)
    if magic != SHARE_MAGIC:
        raise ValueError(f"not a share file: magic {magic!r}")
    version, owner = struct.unpack("<HB", fh.read(3))
    if version != SHARE_VERSION:
        raise ValueError(f"unsupported share file version {version}")
    return PartyId(owner), fh.read(4)


def write_share_file(path, share: Share) -> None:
    """Persist one share as an ARRY-tagged share-format file."""
    with open(path, "wb") as fh:
        open_share_section(fh, share.owner, b"ARRY")
        write_array(fh, share.values)


def read_share_file(path) -> Share:
    with open(path, "rb") as fh:
        owner, tag = read_share_header(fh)
        if tag != b"ARRY":
            raise ValueError(f"expected plain array share, found section {tag!r}")
        return Share(owner, read_array(fh))
