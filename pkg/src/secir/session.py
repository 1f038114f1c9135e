"""Per-party protocol execution context.

A PartySession bundles the channel, the dealer material stream, the party's
local randomness and the reveal recorder.  Protocol rounds are attributed
to the outermost protocol scope (so a multiplication inside a comparison
bills the comparison), while reconstructed-value labels are attributed to
the innermost scope (so an inversion nested in PCA still owns its W).
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from dataclasses import dataclass

import numpy as np

from .dealer import MaterialStream
from .errors import ConfigMismatch
from .numeric import DEFAULT_CONFIG, FixedPointConfig, truncate
from .rng import derive_rng
from .sharing import PartyId
from .transport import TAG_HANDSHAKE, TAG_NAMES, TAG_RAW, Channel, local_pair


@dataclass(frozen=True)
class Reveal:
    scope: str
    label: str
    size: int


class PartySession:
    def __init__(self, party: PartyId, chan: Channel, material: MaterialStream,
                 cfg: FixedPointConfig = DEFAULT_CONFIG, party_seed: int = 0):
        self.party = party
        self.chan = chan
        self.material = material
        self.cfg = cfg
        self.party_seed = int(party_seed)
        self.local_rng = derive_rng(party_seed, f"party:{int(party)}")
        self.reveals: list[Reveal] = []
        self._tag_stack: list[int] = []
        self._scope_stack: list[str] = []

    # -- protocol scoping ----------------------------------------------

    @contextlib.contextmanager
    def protocol(self, tag: int, name: str | None = None):
        self._tag_stack.append(tag)
        self._scope_stack.append(name or TAG_NAMES.get(tag, str(tag)))
        try:
            yield
        finally:
            self._tag_stack.pop()
            self._scope_stack.pop()

    @property
    def active_tag(self) -> int:
        return self._tag_stack[0] if self._tag_stack else TAG_RAW

    @property
    def active_scope(self) -> str:
        return self._scope_stack[-1] if self._scope_stack else "raw"

    @property
    def meter(self):
        return self.chan.meter

    def reveal_labels(self) -> set[tuple[str, str]]:
        return {(r.scope, r.label) for r in self.reveals}

    # -- value codec ------------------------------------------------------

    def _encode(self, arrays) -> bytes:
        parts = []
        for a in arrays:
            a = np.ascontiguousarray(a, dtype=np.float64)
            if self.cfg.truncate_wire:
                a = truncate(a, self.cfg)
            parts.append(a.tobytes())
        return b"".join(parts)

    @staticmethod
    def _decode(payload: bytes, shapes) -> list[np.ndarray]:
        out = []
        offset = 0
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
            out.append(arr.reshape(shape) if shape else float(arr[0]))
            offset += 8 * n
        return out

    # -- round-counted primitives ------------------------------------------

    def exchange_round(self, masked=(), reveal=()):
        """One interaction round carrying masked arrays and/or reveals.

        ``masked`` arrays (Beaver e/f differences) come back as the peer's
        halves; ``reveal`` is a list of (label, array) pairs that are
        reconstructed and recorded.  Returns (peer_masked, revealed).
        """
        masked = [np.asarray(a, dtype=np.float64) for a in masked]
        labels = [lab for lab, _ in reveal]
        rev_arrays = [np.asarray(a, dtype=np.float64) for _, a in reveal]
        arrays = masked + rev_arrays
        payload = self.chan.batched_exchange(self.active_tag, self._encode(arrays))
        theirs = self._decode(payload, [a.shape for a in arrays])
        peer_masked = theirs[:len(masked)]
        revealed = []
        for lab, mine_raw, their in zip(labels, rev_arrays, theirs[len(masked):]):
            # run my own half through the codec so both parties reconstruct
            # the identical public value even with wire truncation on
            mine = self._decode(self._encode([mine_raw]), [mine_raw.shape])[0]
            revealed.append(mine + their)
            self.reveals.append(Reveal(self.active_scope, lab,
                                       int(np.prod(mine_raw.shape)) if mine_raw.shape else 1))
        return peer_masked, revealed

    def exchange_masked(self, *arrays):
        """Swap mask-difference arrays (Beaver e/f); one round, not a reveal."""
        peer, _ = self.exchange_round(masked=arrays)
        return peer

    def reveal(self, label: str, *arrays):
        """Reconstruct shared values at both parties; one round, recorded."""
        _, revealed = self.exchange_round(reveal=[(label, a) for a in arrays])
        return revealed[0] if len(revealed) == 1 else revealed

    def reveal_to(self, owner: PartyId, label: str, share):
        """Reconstruct a shared value at one party only; one round.

        The non-owner sends its share and gets None back; the owner returns
        the reconstructed value.  Recorded at both parties.
        """
        share = np.asarray(share, dtype=np.float64)
        self.reveals.append(Reveal(self.active_scope, label,
                                   int(np.prod(share.shape)) if share.shape else 1))
        if self.party == owner:
            payload = self.chan.recv_flight(self.active_tag)
            theirs = self._decode(payload, [share.shape])[0]
            mine = self._decode(self._encode([share]), [share.shape])[0]
            return mine + theirs
        self.chan.send_flight(self.active_tag, self._encode([share]))
        return None

    def send_plain(self, label: str, value) -> None:
        """Flight of an already-public array toward the peer; recorded."""
        value = np.asarray(value, dtype=np.float64)
        self.reveals.append(Reveal(self.active_scope, label,
                                   int(np.prod(value.shape)) if value.shape else 1))
        self.chan.send_flight(self.active_tag, value.tobytes())

    def recv_plain(self, label: str, shape) -> np.ndarray:
        payload = self.chan.recv_flight(self.active_tag)
        value = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        self.reveals.append(Reveal(self.active_scope, label,
                                   int(np.prod(shape)) if shape else 1))
        return value

    def send_ints(self, values) -> None:
        """Flight of public integers (IDs and the like)."""
        self.chan.send_flight(self.active_tag,
                              np.ascontiguousarray(values, dtype="<i8").tobytes())

    def recv_ints(self) -> np.ndarray:
        payload = self.chan.recv_flight(self.active_tag)
        return np.frombuffer(payload, dtype="<i8").copy()

    def handshake(self, config_text: str) -> None:
        """Config-hash comparison; aborts the session on mismatch."""
        digest = hashlib.sha256(config_text.encode("utf-8")).digest()
        theirs = self.chan.batched_exchange(TAG_HANDSHAKE, digest)
        if theirs != digest:
            raise ConfigMismatch("the two servers run different configs")


def run_pair(fn1, fn2, *, cfg: FixedPointConfig = DEFAULT_CONFIG,
             dealer_seed: int = 0, party_seeds: tuple[int, int] = (1, 2),
             capacity: dict | None = None, session_id: int = 0,
             timeout: float = 30.0, record_transcript: bool = False,
             materials: tuple[MaterialStream, MaterialStream] | None = None):
    """Run both party procedures of a protocol over an in-process channel.

    Returns (result_p1, result_p2, session_p1, session_p2); exceptions from
    either thread are re-raised in the caller.
    """
    chan1, chan2 = local_pair(session_id=session_id, timeout=timeout,
                              record_transcript=record_transcript)
    if materials is None:
        materials = (MaterialStream.lazy(PartyId.P1, dealer_seed, cfg, capacity),
                     MaterialStream.lazy(PartyId.P2, dealer_seed, cfg, capacity))
    s1 = PartySession(PartyId.P1, chan1, materials[0], cfg, party_seeds[0])
    s2 = PartySession(PartyId.P2, chan2, materials[1], cfg, party_seeds[1])
    results: list = [None, None]
    errors: list = [None, None]

    def runner(idx, fn, sess):
        try:
            results[idx] = fn(sess)
        except BaseException as exc:  # noqa: BLE001 - surfaced to caller
            errors[idx] = exc
            sess.chan.close()

    t1 = threading.Thread(target=runner, args=(0, fn1, s1))
    t2 = threading.Thread(target=runner, args=(1, fn2, s2))
    t1.start()
    t2.start()
    t1.join()
    t2.join()
    for err in errors:
        if err is not None:
            raise err
    return results[0], results[1], s1, s2
