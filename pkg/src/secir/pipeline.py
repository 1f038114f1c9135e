"""End-to-end orchestration: outsourcing, secure build, and secure query.

The flow mirrors the system model: the owner splits images into two share
stores, the two servers jointly extract features, compress them and build
an index, and a query walks the same path before the top-m image shares go
back to the user.  Every stage appends its (rounds, bytes) to a per-stage
meter table, and all public decisions land in a DecisionLog that must match
the plaintext oracle's exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import SessionConfig
from .decisions import DecisionLog
from .dealer import KIND_CMP, KIND_SORT, KIND_TRIPLE, matmul_key
from .errors import SecretOutOfRange
from .index import (HkmIndex, LshIndex, c2lsh_build, c2lsh_query, hkm_build,
                    hkm_query, linear_query)
from .nn import PublicModel, infer, infer_batch, make_demo_model
from .pca import PcaState, compress_query, sec_pca
from .session import PartySession
from .sharing import PartyId, Share, split
from .transport import TAG_NAMES

STAGE_EXTRACT = "extract"
STAGE_PCA = "pca"
STAGE_INDEX = "index_build"
STAGE_Q_EXTRACT = "q_extract"
STAGE_Q_COMPRESS = "q_compress"
STAGE_Q_SEARCH = "q_search"


class StageMeter:
    """Per-stage deltas of the channel meter, for meter.csv."""

    def __init__(self, meter):
        self.meter = meter
        self.rows: list[tuple[str, str, int, int]] = []
        self._rounds, self._bytes = meter.snapshot()

    def mark(self, stage: str) -> None:
        rounds, bytes_ = self.meter.snapshot()
        tags = set(rounds) | set(self._rounds) | set(bytes_) | set(self._bytes)
        for tag in sorted(tags):
            dr = rounds.get(tag, 0) - self._rounds.get(tag, 0)
            db = bytes_.get(tag, 0) - self._bytes.get(tag, 0)
            if dr or db:
                self.rows.append((stage, TAG_NAMES.get(tag, str(tag)), dr, db))
        self._rounds, self._bytes = rounds, bytes_

    def stage_bytes(self, stage: str) -> int:
        return sum(db for st, _, _, db in self.rows if st == stage)

    def stage_rounds(self, stage: str) -> int:
        return sum(dr for st, _, dr, _ in self.rows if st == stage)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "protocol_tag", "rounds", "bytes"])
            writer.writerows(self.rows)


@dataclass
class ShareStore:
    """One party's holdings: image shares keyed by public ID."""

    party: PartyId
    images: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def ids(self) -> list[int]:
        return sorted(self.images)


def outsource(images, ids, owner_seed: int, cfg) -> tuple[ShareStore, ShareStore]:
    """Split every image into two in-range shares, one store per server."""
    store1, store2 = ShareStore(PartyId.P1), ShareStore(PartyId.P2)
    for image_id, image in zip(ids, images):
        image = np.asarray(image, dtype=np.float64)
        if np.min(image) < 0.0 or np.max(image) > 1.0:
            raise SecretOutOfRange("images must be scaled to [0, 1]")
        s1, s2 = split(image, int(owner_seed) + int(image_id), cfg)
        store1.images[int(image_id)] = s1.values
        store2.images[int(image_id)] = s2.values
    return store1, store2


@dataclass
class BuiltIndex:
    kind: str
    ids: np.ndarray
    features: np.ndarray            # this party's raw feature shares (n, d)
    proj: np.ndarray                # compressed shares (n, s); == features for linear
    pca_state: PcaState | None
    hkm: HkmIndex | None = None
    lsh: LshIndex | None = None


def extract_features(sess: PartySession, store: ShareStore, model: PublicModel,
                     pool_mode: str) -> np.ndarray:
    stack = np.stack([store.images[i] for i in store.ids])
    return infer_batch(sess, model, stack, pool_mode)


def build_party(sess: PartySession, store: ShareStore, model: PublicModel,
                params: SessionConfig, log: DecisionLog | None = None,
                stages: StageMeter | None = None) -> BuiltIndex:
    """One server's side of the index-building phase."""
    log = log if log is not None else DecisionLog()
    stages = stages if stages is not None else StageMeter(sess.meter)
    ids = np.asarray(store.ids, dtype=np.int64)

    features = extract_features(sess, store, model, params.pool_mode)
    stages.mark(STAGE_EXTRACT)

    if params.index_kind == "linear":
        proj, state = features, None
    else:
        proj, state = sec_pca(sess, features, params.s)
    stages.mark(STAGE_PCA)

    built = BuiltIndex(params.index_kind, ids, features, proj, state)
    if params.index_kind == "hkm":
        built.hkm = hkm_build(sess, proj, ids, params.k, params.effective_leaf_max(),
                              params.index_seed, log=log)
    elif params.index_kind == "c2lsh":
        built.lsh = c2lsh_build(sess, proj, ids, params.m_f, params.w,
                                params.index_seed, log=log)
    stages.mark(STAGE_INDEX)
    return built


def query_party(sess: PartySession, store: ShareStore, built: BuiltIndex,
                model: PublicModel, query_share: np.ndarray, m: int,
                params: SessionConfig, qlabel: str = "q",
                log: DecisionLog | None = None,
                stages: StageMeter | None = None):
    """One server's side of a retrieval; returns (top ids, image shares)."""
    log = log if log is not None else DecisionLog()
    stages = stages if stages is not None else StageMeter(sess.meter)
    model_feature = infer(sess, model, query_share, params.pool_mode)
    stages.mark(STAGE_Q_EXTRACT)

    if built.kind == "linear":
        q = model_feature
    else:
        q = compress_query(sess, model_feature, built.pca_state)
    stages.mark(STAGE_Q_COMPRESS)

    if built.kind == "hkm":
        top, _ = hkm_query(sess, built.hkm, built.proj, q, m, log, qlabel)
    elif built.kind == "c2lsh":
        top, _ = c2lsh_query(sess, built.lsh, built.proj, q, m, params.alpha,
                             log, qlabel)
    else:
        top, _ = linear_query(sess, built.proj, built.ids, q, m, log, qlabel)
    stages.mark(STAGE_Q_SEARCH)
    result_shares = [store.images[i] for i in top]
    return top, result_shares


def make_trapdoor(query_image: np.ndarray, seed: int, cfg) -> tuple[Share, Share]:
    """User-side split of the query image into the two server shares."""
    return split(np.asarray(query_image, dtype=np.float64), seed, cfg)


def decrypt_result(shares1, shares2, cfg) -> list[np.ndarray]:
    """User-side pixel addition of the two returned share lists."""
    from .numeric import truncate
    return [truncate(np.asarray(a) + np.asarray(b), cfg) for a, b in zip(shares1, shares2)]


def provision_counts(params: SessionConfig, n_images: int | None = None,
                     n_queries: int = 4) -> dict[str, int]:
    """Material estimate for one build plus a query budget, over-provisioned.

    Derived from the per-layer batch sizes of the extractor, the PCA lane
    shapes and a generous candidate bound for the index stage; the factor
    covers the data-dependent candidate loop.
    """
    n = n_images if n_images is not None else params.n_images
    model = make_demo_model(params.model_seed, widths=params.model_widths,
                            input_hw=params.image_size)
    hw = params.image_size
    relu_elems = 0
    pool_blocks = 0
    ch = model.input_shape[0]
    for kind, layer in model.layers:
        if kind == "conv":
            ch = layer.weights.shape[0]
        elif kind == "relu":
            relu_elems += ch * hw * hw
        elif kind == "maxpool2":
            pool_blocks += ch * (hw // 2) * (hw // 2)
            hw //= 2
    d = model.feature_dim
    s = params.s
    per_infer_triples = relu_elems + 6 * pool_blocks
    per_infer_cmp = relu_elems + 3 * pool_blocks
    per_infer_sort = pool_blocks  # sort-mode pooling
    infer_count = n + n_queries

    k = params.k
    kmeans_points = n * k * KMEANS_ITERS_BOUND
    index_triples = kmeans_points * (d + s) + 4 * n * (3 * params.m + k) * s
    index_sorts = n * KMEANS_ITERS_BOUND + 16 * (n_queries + 1) + n

    counts = {
        KIND_TRIPLE: per_infer_triples * infer_count + index_triples
        + 2 * d * d + 2 * d * s + 4 * n * d,
        KIND_CMP: per_infer_cmp * infer_count,
        KIND_SORT: per_infer_sort * infer_count + index_sorts,
        matmul_key(d, d, d): 3,
        matmul_key(d, n, d): 1,
        matmul_key(n, d, s): 1,
        matmul_key(1, d, s): n_queries,
        matmul_key(params.m_f, d, n): 1,
        matmul_key(params.m_f, d, 1): n_queries,
    }
    return {kind: int(np.ceil(count * params.provision_factor))
            for kind, count in counts.items()}


KMEANS_ITERS_BOUND = 30
