"""Secure index construction and querying over shared feature vectors.

Image IDs, tree topology, bucket tables and cluster assignments are public
and identical on both parties; only the vector and centroid VALUES are
shares.  Every public decision is driven either by a masked sort reveal or
by revealed hash values, so a plaintext run with the same seeds makes the
same decisions.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .decisions import DecisionLog
from .errors import ShapeMismatch
from .protocols import _mul_core, sec_sort_many
from .rng import derive_rng
from .session import PartySession
from .sharing import PartyId, open_share_section, read_array, read_share_header, write_array
from .transport import (TAG_C2LSH_BUILD, TAG_C2LSH_QUERY, TAG_HKM_BUILD,
                        TAG_HKM_QUERY, TAG_LINEAR_QUERY, TAG_SEC_KMEANS)

KMEANS_MAX_ITERS = 30
HKM_MAX_DEPTH = 32
REHASH_MAX_LEVEL = 64


@dataclass
class HkmNode:
    path: str
    centroid: np.ndarray | None = None   # this party's share; None at the root
    children: list["HkmNode"] = field(default_factory=list)
    leaf_ids: np.ndarray | None = None   # public image IDs at leaves

    @property
    def is_leaf(self) -> bool:
        return self.leaf_ids is not None


@dataclass
class HkmIndex:
    root: HkmNode
    ids: np.ndarray  # public, column order of the feature share matrix


@dataclass(frozen=True)
class LshFunction:
    a_share: np.ndarray  # (d,), per-party Gaussian half
    b_share: float       # party one holds b, party two holds 0
    w: float
    x: int


@dataclass
class LshIndex:
    functions: list[LshFunction]
    stored_h: np.ndarray  # (m_f, n), public revealed hash values
    ids: np.ndarray
    tables: list[dict[int, list[int]]]
    w: float


def _sq_dist_shares(sess: PartySession, diffs: np.ndarray) -> np.ndarray:
    """Squared-norm shares for difference rows; one multiplication round."""
    sq = _mul_core(sess, diffs, diffs)
    return sq.sum(axis=-1)


# -- secure k-means -----------------------------------------------------------


@dataclass
class KmeansRun:
    label: str
    ids: np.ndarray       # public IDs of the member vectors
    X: np.ndarray         # (n_r, d) this party's shares
    k: int
    assign: np.ndarray | None = None
    centroids: np.ndarray | None = None
    done: bool = False


def kmeans_multi(sess: PartySession, runs: list[KmeansRun], index_seed: int,
                 max_iters: int = KMEANS_MAX_ITERS,
                 log: DecisionLog | None = None) -> None:
    """Run several k-means instances in lock-step, batching their rounds.

    Party one picks each run's initial centroid IDs from a seeded stream
    and flights them over; per iteration all runs share one distance round
    and one batched sort.  Assignments are public; centroid updates are
    local means.  Results land in the run objects.
    """
    log = log if log is not None else DecisionLog()
    with sess.protocol(TAG_SEC_KMEANS):
        counts = []
        if sess.party == PartyId.P1:
            flat = []
            for run in runs:
                rng = derive_rng(index_seed, f"kmeans-init:{run.label}")
                pos = np.sort(rng.choice(len(run.ids), size=run.k, replace=False))
                counts.append(pos)
                flat.extend([run.k, *pos.tolist()])
            sess.send_ints(flat)
        else:
            flat = sess.recv_ints().tolist()
            cursor = 0
            for run in runs:
                k = flat[cursor]
                pos = np.asarray(flat[cursor + 1:cursor + 1 + k], dtype=np.int64)
                counts.append(pos)
                cursor += 1 + k
        for run, pos in zip(runs, counts):
            run.centroids = run.X[pos].copy()
            log.add(f"kmeans_init:{run.label}", [int(run.ids[p]) for p in pos])

        for iteration in range(max_iters):
            active = [r for r in runs if not r.done]
            if not active:
                break
            diffs, spans = [], []
            for run in active:
                d = run.X[:, None, :] - run.centroids[None, :, :]
                diffs.append(d.reshape(-1, run.X.shape[1]))
                spans.append((len(run.ids), run.k))
            dist_flat = _sq_dist_shares(sess, np.concatenate(diffs, axis=0))
            groups, owners = [], []
            offset = 0
            for run, (n_r, k) in zip(active, spans):
                block = dist_flat[offset:offset + n_r * k].reshape(n_r, k)
                offset += n_r * k
                for row in block:
                    groups.append(row)
                    owners.append(run)
                run._dist_block = block  # noqa: SLF001 - scratch for reseeding
            results = sec_sort_many(sess, groups)
            cursor = 0
            for run, (n_r, k) in zip(active, spans):
                new_assign = np.array(
                    [int(results[cursor + i].perm[0]) for i in range(n_r)],
                    dtype=np.int64)
                cursor += n_r
                reseeded = _fix_empty_clusters(sess, run, new_assign, log, iteration)
                log.add(f"kmeans_assign:{run.label}:{iteration}", new_assign.tolist())
                if not reseeded and run.assign is not None and np.array_equal(new_assign, run.assign):
                    run.done = True
                run.assign = new_assign
                if not run.done:
                    for c in range(run.k):
                        members = new_assign == c
                        if members.any():
                            run.centroids[c] = run.X[members].mean(axis=0)


def _fix_empty_clusters(sess: PartySession, run: KmeansRun, assign: np.ndarray,
                        log: DecisionLog, iteration: int) -> bool:
    """Re-seed empty clusters with the point farthest from its centroid.

    The farthest point is chosen with a dedicated masked sort over each
    point's distance to its assigned centroid, so both parties (and the
    oracle) pick the same one.
    """
    empties = [c for c in range(run.k) if not np.any(assign == c)]
    if not empties:
        return False
    for c in empties:
        own = run._dist_block[np.arange(len(assign)), assign]
        res = sec_sort_many(sess, [own])[0]
        far = int(res.perm[-1])
        run.centroids[c] = run.X[far].copy()
        assign[far] = c
        log.add(f"kmeans_reseed:{run.label}:{iteration}:{c}", int(run.ids[far]))
    return True


def sec_kmeans(sess: PartySession, X: np.ndarray, ids, k: int,
               max_iters: int = KMEANS_MAX_ITERS, index_seed: int = 0,
               label: str = "root", log: DecisionLog | None = None):
    """Single secure k-means; returns (centroid shares, public assignment)."""
    if k > len(ids):
        raise ShapeMismatch(f"k={k} exceeds point count {len(ids)}")
    run = KmeansRun(label, np.asarray(ids, dtype=np.int64), np.asarray(X, float), k)
    kmeans_multi(sess, [run], index_seed, max_iters, log)
    return run.centroids, run.assign


# -- hierarchical k-means tree ------------------------------------------------


def hkm_build(sess: PartySession, X: np.ndarray, ids, k: int, leaf_max: int,
              index_seed: int = 0, max_iters: int = KMEANS_MAX_ITERS,
              log: DecisionLog | None = None) -> HkmIndex:
    """Recursive k-means partitioning until every leaf holds <= leaf_max IDs.

    Splits at one depth run as a single batched multi-k-means, so the
    interaction depth grows with the tree height, not the node count.
    """
    if leaf_max < 1:
        raise ShapeMismatch("leaf_max must be >= 1")
    log = log if log is not None else DecisionLog()
    X = np.asarray(X, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    with sess.protocol(TAG_HKM_BUILD):
        root = HkmNode("root")
        frontier = [(root, np.arange(len(ids)))]
        for _depth in range(HKM_MAX_DEPTH):
            to_split = [(node, pos) for node, pos in frontier if len(pos) > leaf_max]
            for node, pos in frontier:
                if len(pos) <= leaf_max:
                    node.leaf_ids = ids[pos]
                    log.add(f"hkm_leaf:{node.path}", ids[pos].tolist())
            if not to_split:
                break
            runs = [KmeansRun(node.path, ids[pos], X[pos], min(k, len(pos)))
                    for node, pos in to_split]
            kmeans_multi(sess, runs, index_seed, max_iters, log)
            next_frontier = []
            for (node, pos), run in zip(to_split, runs):
                for c in range(run.k):
                    members = pos[run.assign == c]
                    child = HkmNode(f"{node.path}.{c}", centroid=run.centroids[c].copy())
                    node.children.append(child)
                    next_frontier.append((child, members))
            frontier = next_frontier
        else:
            for node, pos in frontier:  # depth cap: force leaves
                node.leaf_ids = ids[pos]
                log.add(f"hkm_leaf:{node.path}", ids[pos].tolist())
    return HkmIndex(root, ids)


def hkm_query(sess: PartySession, index: HkmIndex, F: np.ndarray, q: np.ndarray,
              m: int, log: DecisionLog | None = None, qlabel: str = "q"):
    """Best-first descent by masked distance, then exact top-m ranking.

    One sort tuple masks every distance in the query session, which keeps
    masked values comparable across tree levels; the reveal surface is the
    masked distances themselves (their order and difference ratios).
    """
    log = log if log is not None else DecisionLog()
    F = np.asarray(F, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    floor_count = 3 * m
    with sess.protocol(TAG_HKM_QUERY):
        mask_tuple = sess.material.take_sort()
        pq: list[tuple[float, int, HkmNode]] = []
        seq = 0
        collected: list[int] = []
        expanded: list[str] = []

        def expand(node: HkmNode):
            nonlocal seq
            cents = np.stack([child.centroid for child in node.children])
            dists = _sq_dist_shares(sess, cents - q[None, :])
            res = sec_sort_many(sess, [dists], mask_tuple)[0]
            expanded.append(node.path)
            for child, fval in zip(node.children, res.masked):
                heapq.heappush(pq, (float(fval), seq, child))
                seq += 1

        if index.root.is_leaf:
            collected.extend(index.root.leaf_ids.tolist())
        else:
            expand(index.root)
            while pq and len(collected) < floor_count:
                _, _, node = heapq.heappop(pq)
                if node.is_leaf:
                    collected.extend(node.leaf_ids.tolist())
                else:
                    expand(node)
        log.add(f"hkm_descend:{qlabel}", expanded)
        log.add(f"hkm_candidates:{qlabel}", [int(i) for i in collected])

        id_pos = {int(v): i for i, v in enumerate(index.ids)}
        pos = np.array([id_pos[int(i)] for i in collected], dtype=np.int64)
        dists = _sq_dist_shares(sess, F[pos] - q[None, :])
        res = sec_sort_many(sess, [dists], mask_tuple)[0]
        ranked = [int(collected[i]) for i in res.perm]
        top = ranked[:m]
        log.add(f"top_m:{qlabel}", top)
    return top, collected


# -- C2LSH --------------------------------------------------------------------


def make_lsh_functions(party: PartyId, d: int, m_f: int, w: float,
                       index_seed: int) -> list[LshFunction]:
    """Per-party halves of the hash family.

    Each party draws its half of the projection vector from N(0, 1/2) so
    the logical vector is standard normal; the offset b lives with party
    one only, and the positive integer x is public.
    """
    functions = []
    for j in range(m_f):
        a = derive_rng(index_seed, f"lsh-a:{int(party)}:{j}").normal(
            0.0, math.sqrt(0.5), size=d)
        x = int(derive_rng(index_seed, f"lsh-x:{j}").integers(1, 9))
        b = float(derive_rng(index_seed, f"lsh-b:{j}").uniform(0.0, w)) \
            if party == PartyId.P1 else 0.0
        functions.append(LshFunction(a, b, w, x))
    return functions


def _hash_shares(sess: PartySession, functions: list[LshFunction],
                 vectors: np.ndarray) -> np.ndarray:
    """Shares of h'(o) for all vectors: one matrix round plus local offsets."""
    A = np.stack([fn.a_share for fn in functions])
    from .protocols import _mat_mul_core  # local import to keep module header light
    H = _mat_mul_core(sess, A, vectors.T)
    offs = np.array([fn.b_share * fn.w * fn.x for fn in functions])
    return H + offs[:, None]


def c2lsh_build(sess: PartySession, F: np.ndarray, ids, m_f: int, w: float,
                index_seed: int = 0, log: DecisionLog | None = None) -> LshIndex:
    """Hash all vectors into per-function bucket tables; two rounds total."""
    log = log if log is not None else DecisionLog()
    F = np.asarray(F, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    with sess.protocol(TAG_C2LSH_BUILD):
        functions = make_lsh_functions(sess.party, F.shape[1], m_f, w, index_seed)
        H_share = _hash_shares(sess, functions, F)
        H = np.asarray(sess.reveal("h_prime", H_share), dtype=np.float64)
        buckets = np.floor(H / w).astype(np.int64)
        tables: list[dict[int, list[int]]] = []
        for j in range(m_f):
            table: dict[int, list[int]] = {}
            for col, image_id in enumerate(ids):
                table.setdefault(int(buckets[j, col]), []).append(int(image_id))
            tables.append(table)
            log.add(f"lsh_table:{j}", {str(k): v for k, v in sorted(table.items())})
    return LshIndex(functions, H, ids, tables, w)


def c2lsh_query(sess: PartySession, index: LshIndex, F: np.ndarray, q: np.ndarray,
                m: int, alpha: float = 0.5, log: DecisionLog | None = None,
                qlabel: str = "q"):
    """Collision counting with virtual rehash, then exact top-m; five rounds.

    A vector collides at widening level rho when its stored hash and the
    query hash share a bucket of width w * 2^rho; levels widen (locally,
    using only revealed hash values) until at least 3m IDs reach the
    collision threshold ceil(alpha * m_f).
    """
    log = log if log is not None else DecisionLog()
    F = np.asarray(F, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with sess.protocol(TAG_C2LSH_QUERY):
        hq_share = _hash_shares(sess, index.functions, q.reshape(1, -1)).ravel()
        hq = np.asarray(sess.reveal("h_prime", hq_share), dtype=np.float64)
        threshold = math.ceil(alpha * len(index.functions))
        n = len(index.ids)
        need = min(3 * m, n)
        cand_mask = np.zeros(n, dtype=bool)
        level = 0
        for level in range(REHASH_MAX_LEVEL + 1):
            width = index.w * (2.0 ** level)
            collide = (np.floor(index.stored_h / width)
                       == np.floor(hq / width)[:, None])
            cand_mask = collide.sum(axis=0) >= threshold
            if int(cand_mask.sum()) >= need:
                break
        else:
            cand_mask[:] = True
        candidates = [int(i) for i in index.ids[cand_mask]]
        log.add(f"lsh_level:{qlabel}", level)
        log.add(f"lsh_candidates:{qlabel}", candidates)

        pos = np.flatnonzero(cand_mask)
        dists = _sq_dist_shares(sess, F[pos] - q[None, :])
        res = sec_sort_many(sess, [dists])[0]
        ranked = [candidates[i] for i in res.perm]
        top = ranked[:m]
        log.add(f"top_m:{qlabel}", top)
    return top, candidates


# -- linear scan baseline -----------------------------------------------------


def linear_query(sess: PartySession, F: np.ndarray, ids, q: np.ndarray, m: int,
                 log: DecisionLog | None = None, qlabel: str = "q"):
    """Exact distances to every vector plus one sort; the no-index baseline."""
    log = log if log is not None else DecisionLog()
    F = np.asarray(F, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    with sess.protocol(TAG_LINEAR_QUERY):
        dists = _sq_dist_shares(sess, F - np.asarray(q, float)[None, :])
        res = sec_sort_many(sess, [dists])[0]
        ranked = [int(ids[i]) for i in res.perm]
        top = ranked[:m]
        log.add(f"top_m:{qlabel}", top)
    return top, [int(i) for i in ids]


# -- persistence --------------------------------------------------------------


def save_hkm(path, owner: PartyId, index: HkmIndex) -> None:
    nodes: list[HkmNode] = []

    def walk(node: HkmNode):
        nodes.append(node)
        for child in node.children:
            walk(child)

    walk(index.root)
    topo = [{"path": n.path,
             "children": [c.path for c in n.children],
             "leaf_ids": None if n.leaf_ids is None else n.leaf_ids.tolist(),
             "has_centroid": n.centroid is not None} for n in nodes]
    header = json.dumps({"ids": index.ids.tolist(), "nodes": topo}).encode("utf-8")
    with open(path, "wb") as fh:
        open_share_section(fh, owner, b"HKMI")
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for node in nodes:
            if node.centroid is not None:
                write_array(fh, node.centroid)


def load_hkm(path) -> tuple[HkmIndex, PartyId]:
    with open(path, "rb") as fh:
        owner, tag = read_share_header(fh)
        if tag != b"HKMI":
            raise ValueError(f"expected HKMI section, found {tag!r}")
        hlen, = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        by_path: dict[str, HkmNode] = {}
        for spec in header["nodes"]:
            node = HkmNode(spec["path"])
            if spec["leaf_ids"] is not None:
                node.leaf_ids = np.asarray(spec["leaf_ids"], dtype=np.int64)
            by_path[spec["path"]] = node
        for spec in header["nodes"]:
            if spec["has_centroid"]:
                by_path[spec["path"]].centroid = read_array(fh)
        for spec in header["nodes"]:
            by_path[spec["path"]].children = [by_path[p] for p in spec["children"]]
    root = by_path[header["nodes"][0]["path"]]
    return HkmIndex(root, np.asarray(header["ids"], dtype=np.int64)), owner


def save_lsh(path, owner: PartyId, index: LshIndex) -> None:
    header = json.dumps({
        "w": index.w,
        "x": [fn.x for fn in index.functions],
        "b": [fn.b_share for fn in index.functions],
        "ids": index.ids.tolist(),
    }).encode("utf-8")
    with open(path, "wb") as fh:
        open_share_section(fh, owner, b"LSHI")
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        write_array(fh, np.stack([fn.a_share for fn in index.functions]))
        write_array(fh, index.stored_h)
        fh.write(struct.pack("<H", len(index.tables)))
        for table in index.tables:
            fh.write(struct.pack("<I", len(table)))
            for bid, members in table.items():
                fh.write(struct.pack("<qI", bid, len(members)))
                fh.write(np.asarray(members, dtype="<u4").tobytes())


def load_lsh(path) -> tuple[LshIndex, PartyId]:
    with open(path, "rb") as fh:
        owner, tag = read_share_header(fh)
        if tag != b"LSHI":
            raise ValueError(f"expected LSHI section, found {tag!r}")
        hlen, = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        A = read_array(fh)
        stored_h = read_array(fh)
        ntab, = struct.unpack("<H", fh.read(2))
        tables = []
        for _ in range(ntab):
            nbuckets, = struct.unpack("<I", fh.read(4))
            table: dict[int, list[int]] = {}
            for _ in range(nbuckets):
                bid, count = struct.unpack("<qI", fh.read(12))
                table[bid] = np.frombuffer(fh.read(4 * count), dtype="<u4").astype(int).tolist()
            tables.append(table)
    functions = [LshFunction(A[j], header["b"][j], header["w"], header["x"][j])
                 for j in range(len(header["x"]))]
    index = LshIndex(functions, stored_h, np.asarray(header["ids"], dtype=np.int64),
                     tables, header["w"])
    return index, owner
