"""Offline correlated-randomness generation and streaming.

The dealer never sees online data: it produces multiplication triples,
comparison tuples and sorting tuples, splits each into two halves and hands
every party its half.  Streams are deterministic functions of the dealer
seed, one sub-stream per tuple kind, so both parties (and a replay) derive
consistent halves no matter how consumption interleaves across kinds.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import DurationTooShort, MaterialExhausted
from .numeric import DEFAULT_CONFIG, FixedPointConfig
from .rng import derive_rng
from .sharing import PartyId

MATERIAL_MAGIC = b"ASTM"
MATERIAL_VERSION = 1

KIND_TRIPLE = "triple"
KIND_CMP = "cmp"
KIND_SORT = "sort"

_KIND_CODES = {KIND_TRIPLE: 1, KIND_CMP: 2, KIND_SORT: 3, "matmul": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

# Magnitude window for triple secrets; products stay well inside the
# splittable secret range.
_SECRET_EXP_LO, _SECRET_EXP_HI = -3.0, 3.0


@dataclass(frozen=True)
class BeaverTriple:
    """One party's half of (a, b, c) with logical a*b = c.

    ``a``/``b``/``c`` are arrays of matching shape for elementwise use, or
    (p, q), (q, r), (p, r) matrices for matrix-product use.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


@dataclass(frozen=True)
class CmpTuple:
    """Half of (r, sgn(r), k) with r nonzero and |k| <= eta * |r|."""

    r: np.ndarray
    sgn_r: np.ndarray
    k: np.ndarray


@dataclass(frozen=True)
class SortTuple:
    """Half of (t, k) with t > 0 and |k| <= eta * t."""

    t: float
    k: float


def _signed_exp2(rng, exp_lo: float, exp_hi: float, n: int) -> np.ndarray:
    signs = rng.integers(0, 2, size=n) * 2.0 - 1.0
    return signs * np.exp2(rng.uniform(exp_lo, exp_hi, size=n))


def _split_pair(values: np.ndarray, cfg: FixedPointConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized in-range split without grid snapping (dealer internal).

    Keeping dealer halves off the fixed-point grid makes the Beaver algebra
    exact at carrier precision; grid discipline applies to data shares and,
    optionally, the wire.
    """
    lo, hi = cfg.share_lo, cfg.share_hi
    exp_lo, exp_hi = np.log2(lo), np.log2(hi)
    flat = np.asarray(values, dtype=np.float64).ravel()
    s1 = _signed_exp2(rng, exp_lo, exp_hi, flat.size)
    s2 = flat - s1
    mag = np.abs(s2)
    bad = np.flatnonzero(~((mag == 0.0) | ((mag > lo) & (mag < hi))))
    for _ in range(128):
        if bad.size == 0:
            break
        redraw = _signed_exp2(rng, exp_lo, exp_hi, bad.size)
        s1[bad] = redraw
        rem = flat[bad] - redraw
        s2[bad] = rem
        mag = np.abs(rem)
        bad = bad[~((mag == 0.0) | ((mag > lo) & (mag < hi)))]
    else:
        raise ValueError("dealer split failed; secret magnitude out of range")
    return s1.reshape(values.shape), s2.reshape(values.shape)


def _draw_secrets(shape, rng) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    return _signed_exp2(rng, _SECRET_EXP_LO, _SECRET_EXP_HI, n).reshape(shape)


def _gen_scalar_triples(n: int, cfg, rng):
    a = _draw_secrets((n,), rng)
    b = _draw_secrets((n,), rng)
    c = a * b
    a1, a2 = _split_pair(a, cfg, rng)
    b1, b2 = _split_pair(b, cfg, rng)
    c1, c2 = _split_pair(c, cfg, rng)
    return (a1, b1, c1), (a2, b2, c2)


def _gen_matmul_triple(p: int, q: int, r: int, cfg, rng):
    A = rng.uniform(-0.5, 0.5, size=(p, q))
    B = rng.uniform(-0.5, 0.5, size=(q, r))
    C = A @ B
    A1, A2 = _split_pair(A, cfg, rng)
    B1, B2 = _split_pair(B, cfg, rng)
    C1, C2 = _split_pair(C, cfg, rng)
    return (A1, B1, C1), (A2, B2, C2)


def _gen_cmp_tuples(n: int, cfg, rng):
    r = _signed_exp2(rng, -1.0, 1.0, n)
    sgn = (r > 0).astype(np.float64)
    k = (rng.integers(0, 2, size=n) * 2.0 - 1.0) * rng.uniform(0.0, cfg.eta, size=n) * np.abs(r)
    r1, r2 = _split_pair(r, cfg, rng)
    s1, s2 = _split_pair(sgn, cfg, rng)
    k1, k2 = _split_pair(k, cfg, rng)
    return (r1, s1, k1), (r2, s2, k2)


def _gen_sort_tuples(n: int, cfg, rng):
    t = np.exp2(rng.uniform(-1.0, 1.0, size=n))
    k = (rng.integers(0, 2, size=n) * 2.0 - 1.0) * rng.uniform(0.0, cfg.eta, size=n) * t
    t1, t2 = _split_pair(t, cfg, rng)
    k1, k2 = _split_pair(k, cfg, rng)
    return (t1, k1), (t2, k2)


def matmul_key(p: int, q: int, r: int) -> str:
    return f"matmul:{p}x{q}x{r}"


GEN_CHUNK = 4096


def _gen_chunked(gen_fn, count: int, cfg, rng):
    """Generate in fixed-size chunks so a stream's content depends only on
    the seed, never on the consumer's request sizes."""
    halves: list[tuple] = []
    remaining = count
    while remaining > 0:
        halves.append(gen_fn(GEN_CHUNK, cfg, rng))
        remaining -= GEN_CHUNK
    ncols = len(halves[0][0])
    out = []
    for side in range(2):
        cols = [np.concatenate([h[side][c] for h in halves])[:count] for c in range(ncols)]
        out.append(tuple(cols))
    return tuple(out)


class _ColumnPool:
    """Per-kind FIFO of tuple columns with single-use accounting."""

    def __init__(self, ncols: int, refill=None, capacity: int | None = None):
        self._cols = [np.empty(0) for _ in range(ncols)]
        self._cursor = 0
        self._refill = refill
        self.capacity = capacity
        self.consumed = 0

    def append(self, columns) -> None:
        self._cols = [np.concatenate([old[self._cursor:], new])
                      for old, new in zip(self._cols, columns)]
        self._cursor = 0

    def take(self, n: int):
        if self.capacity is not None and self.consumed + n > self.capacity:
            raise MaterialExhausted(
                f"requested {n} tuples, {self.capacity - self.consumed} provisioned")
        while len(self._cols[0]) - self._cursor < n:
            if self._refill is None:
                raise MaterialExhausted(
                    f"requested {n} tuples, {len(self._cols[0]) - self._cursor} left")
            self.append(self._refill())
        out = tuple(c[self._cursor:self._cursor + n] for c in self._cols)
        self._cursor += n
        self.consumed += n
        return out


class _MatmulPool:
    """FIFO of matrix triples for one (p, q, r) shape."""

    def __init__(self, refill=None, capacity: int | None = None):
        self._queue: list[tuple] = []
        self._refill = refill
        self.capacity = capacity
        self.consumed = 0

    def append(self, triples) -> None:
        self._queue.extend(triples)

    def take(self):
        if self.capacity is not None and self.consumed + 1 > self.capacity:
            raise MaterialExhausted("matrix-triple queue over capacity")
        if not self._queue:
            if self._refill is None:
                raise MaterialExhausted("matrix-triple stream exhausted")
            self.append(self._refill(1))
        self.consumed += 1
        return self._queue.pop(0)


class MaterialStream:
    """One party's view of the dealer's per-session randomness.

    Tuples are consumed at most once; requesting past the provisioned
    capacity (or past the end of a file-backed stream) raises
    MaterialExhausted rather than wrapping around.
    """

    def __init__(self, party: PartyId, cfg: FixedPointConfig = DEFAULT_CONFIG):
        self.party = party
        self.cfg = cfg
        self._pools: dict[str, object] = {}

    # -- construction -------------------------------------------------

    @classmethod
    def lazy(cls, party: PartyId, dealer_seed: int,
             cfg: FixedPointConfig = DEFAULT_CONFIG,
             capacity: dict[str, int] | None = None) -> "MaterialStream":
        """Stream that derives tuples on demand from per-kind seeded RNGs."""
        stream = cls(party, cfg)
        stream._seed = int(dealer_seed)
        stream._capacity = dict(capacity or {})
        stream._lazy = True
        return stream

    @classmethod
    def from_file(cls, path, cfg: FixedPointConfig = DEFAULT_CONFIG) -> "MaterialStream":
        party, sections = read_material_file(path)
        stream = cls(party, cfg)
        stream._lazy = False
        for kind, shape, columns in sections:
            if kind == "matmul":
                p, q, r = shape
                pool = _MatmulPool(capacity=len(columns))
                pool.append(columns)
                stream._pools[matmul_key(p, q, r)] = pool
            else:
                ncols = 3 if kind in (KIND_TRIPLE, KIND_CMP) else 2
                pool = _ColumnPool(ncols, capacity=len(columns[0]))
                pool.append(columns)
                stream._pools[kind] = pool
        return stream

    # -- pools ---------------------------------------------------------

    def _idx(self) -> int:
        return 0 if self.party == PartyId.P1 else 1

    def _pool(self, key: str):
        if key in self._pools:
            return self._pools[key]
        if not getattr(self, "_lazy", False):
            raise MaterialExhausted(f"no material of kind {key!r} in stream")
        cfg, idx = self.cfg, self._idx()
        rng = derive_rng(self._seed, f"material:{key}")
        if key == KIND_TRIPLE:
            refill = lambda: _gen_scalar_triples(GEN_CHUNK, cfg, rng)[idx]
            pool = _ColumnPool(3, refill, self._capacity.get(key))
        elif key == KIND_CMP:
            refill = lambda: _gen_cmp_tuples(GEN_CHUNK, cfg, rng)[idx]
            pool = _ColumnPool(3, refill, self._capacity.get(key))
        elif key == KIND_SORT:
            refill = lambda: _gen_sort_tuples(GEN_CHUNK, cfg, rng)[idx]
            pool = _ColumnPool(2, refill, self._capacity.get(key))
        elif key.startswith("matmul:"):
            p, q, r = (int(x) for x in key.split(":")[1].split("x"))
            refill = lambda: [_gen_matmul_triple(p, q, r, cfg, rng)[idx]]
            pool = _MatmulPool(refill, self._capacity.get(key))
        else:
            raise ValueError(f"unknown material kind {key!r}")
        self._pools[key] = pool
        return pool

    # -- consumption ----------------------------------------------------

    def take_triples(self, shape) -> BeaverTriple:
        """Elementwise triples of the given shape (scalars use shape ())."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        a, b, c = self._pool(KIND_TRIPLE).take(n)
        if shape:
            return BeaverTriple(a.reshape(shape), b.reshape(shape), c.reshape(shape))
        return BeaverTriple(float(a[0]), float(b[0]), float(c[0]))

    def take_matmul(self, p: int, q: int, r: int) -> BeaverTriple:
        A, B, C = self._pool(matmul_key(p, q, r)).take()
        return BeaverTriple(A, B, C)

    def take_cmp(self, shape) -> CmpTuple:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        r, s, k = self._pool(KIND_CMP).take(n)
        if shape:
            return CmpTuple(r.reshape(shape), s.reshape(shape), k.reshape(shape))
        return CmpTuple(float(r[0]), float(s[0]), float(k[0]))

    def take_sort(self) -> SortTuple:
        t, k = self._pool(KIND_SORT).take(1)
        return SortTuple(float(t[0]), float(k[0]))

    @property
    def consumed(self) -> dict[str, int]:
        return {k: p.consumed for k, p in self._pools.items()}


# -- one-shot generation (tests and file production) -----------------------


def gen_triples(count: int, shape=None, rng_seed: int = 0,
                cfg: FixedPointConfig = DEFAULT_CONFIG):
    """Generate ``count`` triples; returns (columns_p1, columns_p2).

    ``shape=None`` yields scalar triples as three columns; a (p, q, r)
    tuple yields matrix triples as lists of (A, B, C).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if shape is None:
        rng = derive_rng(rng_seed, f"material:{KIND_TRIPLE}")
        return _gen_chunked(_gen_scalar_triples, count, cfg, rng)
    p, q, r = shape
    rng = derive_rng(rng_seed, f"material:{matmul_key(p, q, r)}")
    pairs = [_gen_matmul_triple(p, q, r, cfg, rng) for _ in range(count)]
    return [t[0] for t in pairs], [t[1] for t in pairs]


def gen_cmp_tuples(count: int, rng_seed: int = 0, cfg: FixedPointConfig = DEFAULT_CONFIG):
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = derive_rng(rng_seed, f"material:{KIND_CMP}")
    return _gen_chunked(_gen_cmp_tuples, count, cfg, rng)


def gen_sort_tuples(count: int, rng_seed: int = 0, cfg: FixedPointConfig = DEFAULT_CONFIG):
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = derive_rng(rng_seed, f"material:{KIND_SORT}")
    return _gen_chunked(_gen_sort_tuples, count, cfg, rng)


def triple_from_secrets(a: float, b: float, rng_seed: int = 0,
                        cfg: FixedPointConfig = DEFAULT_CONFIG):
    """Force a scalar triple with chosen secrets (test hook)."""
    rng = derive_rng(rng_seed, "material:forced")
    a1, a2 = _split_pair(np.asarray([float(a)]), cfg, rng)
    b1, b2 = _split_pair(np.asarray([float(b)]), cfg, rng)
    c1, c2 = _split_pair(np.asarray([float(a) * float(b)]), cfg, rng)
    return (BeaverTriple(float(a1[0]), float(b1[0]), float(c1[0])),
            BeaverTriple(float(a2[0]), float(b2[0]), float(c2[0])))


@dataclass(frozen=True)
class ThroughputReport:
    kind: str
    count: int
    seconds: float
    rate: float


def throughput_report(kind: str, duration: float, shape=None,
                      cfg: FixedPointConfig = DEFAULT_CONFIG) -> ThroughputReport:
    """Measure dealer generation rate for ``duration`` seconds (informational)."""
    if duration <= 0:
        raise DurationTooShort(f"duration must be positive, got {duration}")
    rng = derive_rng(0, f"throughput:{kind}")
    count = 0
    start = time.perf_counter()
    while (elapsed := time.perf_counter() - start) < duration:
        if kind == KIND_TRIPLE:
            _gen_scalar_triples(4096, cfg, rng)
            count += 4096
        elif kind == KIND_CMP:
            _gen_cmp_tuples(4096, cfg, rng)
            count += 4096
        elif kind == KIND_SORT:
            _gen_sort_tuples(4096, cfg, rng)
            count += 4096
        elif kind == "matmul":
            p, q, r = shape
            _gen_matmul_triple(p, q, r, cfg, rng)
            count += 1
        else:
            raise ValueError(f"unknown kind {kind!r}")
    elapsed = time.perf_counter() - start
    return ThroughputReport(kind, count, elapsed, count / elapsed)


# -- material files ---------------------------------------------------------


def write_material_file(path, party: PartyId, sections) -> None:
    """Persist one party's material.

    ``sections`` is a list of (kind, shape_or_None, columns): column arrays
    for scalar kinds, a list of (A, B, C) for matmul.
    """
    with open(path, "wb") as fh:
        fh.write(MATERIAL_MAGIC)
        fh.write(struct.pack("<HBH", MATERIAL_VERSION, int(party), len(sections)))
        for kind, shape, columns in sections:
            fh.write(struct.pack("<B", _KIND_CODES[kind]))
            if kind == "matmul":
                p, q, r = shape
                fh.write(struct.pack("<IIIQ", p, q, r, len(columns)))
                for A, B, C in columns:
                    fh.write(np.ascontiguousarray(A, dtype="<f8").tobytes())
                    fh.write(np.ascontiguousarray(B, dtype="<f8").tobytes())
                    fh.write(np.ascontiguousarray(C, dtype="<f8").tobytes())
            else:
                count = len(columns[0])
                fh.write(struct.pack("<IIIQ", 0, 0, 0, count))
                for col in columns:
                    fh.write(np.ascontiguousarray(col, dtype="<f8").tobytes())


def read_material_file(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MATERIAL_MAGIC:
            raise ValueError("not a material file")
        version, party, nsec = struct.unpack("<HBH", fh.read(5))
        if version != MATERIAL_VERSION:
            raise ValueError(f"unsupported material file version {version}")
        sections = []
        for _ in range(nsec):
            code, = struct.unpack("<B", fh.read(1))
            p, q, r, count = struct.unpack("<IIIQ", fh.read(20))
            kind = _CODE_KINDS[code]
            if kind == "matmul":
                triples = []
                for _ in range(count):
                    A = np.frombuffer(fh.read(8 * p * q), dtype="<f8").reshape(p, q).copy()
                    B = np.frombuffer(fh.read(8 * q * r), dtype="<f8").reshape(q, r).copy()
                    C = np.frombuffer(fh.read(8 * p * r), dtype="<f8").reshape(p, r).copy()
                    triples.append((A, B, C))
                sections.append((kind, (p, q, r), triples))
            else:
                ncols = 3 if kind in (KIND_TRIPLE, KIND_CMP) else 2
                cols = [np.frombuffer(fh.read(8 * count), dtype="<f8").copy()
                        for _ in range(ncols)]
                sections.append((kind, None, cols))
    return PartyId(party), sections


def generate_material_files(dealer_seed: int, counts: dict, out_dir,
                            cfg: FixedPointConfig = DEFAULT_CONFIG) -> tuple[str, str]:
    """Produce one ASTM file per party covering the requested counts.

    ``counts`` maps kind keys ("triple", "cmp", "sort", "matmul:PxQxR")
    to tuple counts.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    halves: list[list] = [[], []]
    for key, count in counts.items():
        if count < 1:
            continue
        rng = derive_rng(dealer_seed, f"material:{key}")
        if key == KIND_TRIPLE:
            pair = _gen_chunked(_gen_scalar_triples, count, cfg, rng)
            shape = None
        elif key == KIND_CMP:
            pair = _gen_chunked(_gen_cmp_tuples, count, cfg, rng)
            shape = None
        elif key == KIND_SORT:
            pair = _gen_chunked(_gen_sort_tuples, count, cfg, rng)
            shape = None
        elif key.startswith("matmul:"):
            p, q, r = (int(x) for x in key.split(":")[1].split("x"))
            gen = [_gen_matmul_triple(p, q, r, cfg, rng) for _ in range(count)]
            pair = ([g[0] for g in gen], [g[1] for g in gen])
            shape = (p, q, r)
        else:
            raise ValueError(f"unknown material kind {key!r}")
        kind = "matmul" if key.startswith("matmul:") else key
        halves[0].append((kind, shape, pair[0]))
        halves[1].append((kind, shape, pair[1]))
    paths = []
    for party, sections in zip((PartyId.P1, PartyId.P2), halves):
        path = os.path.join(out_dir, f"material_p{int(party)}.astm")
        write_material_file(path, party, sections)
        paths.append(path)
    return tuple(paths)
