"""Plaintext mirror of the whole retrieval pipeline.

Runs the identical computation on plaintext values with the same seeds and
the same tie-breaking rules, logging the same public-decision records as
the secure pipeline.  Equality of the two logs is the lossless-retrieval
check; the eigensolver here (dense symmetric decomposition) is independent
of the secure path's power iteration.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from .decisions import DecisionLog
from .index import HkmIndex, HkmNode, KMEANS_MAX_ITERS, REHASH_MAX_LEVEL, HKM_MAX_DEPTH
from .nn import PublicModel, plaintext_infer
from .rng import derive_rng
from .sharing import PartyId


def plaintext_pca(F: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centered top-s eigenbasis via a dense symmetric eigensolver.

    Returns (projected n x s, mean, basis d x s) with deterministic column
    signs (largest-magnitude component positive).  This is the independent
    subspace oracle for fidelity checks.
    """
    mean = F.mean(axis=0)
    Xc = F - mean
    vals, vecs = np.linalg.eigh(Xc.T @ Xc)
    order = np.argsort(vals)[::-1][:s]
    V = vecs[:, order]
    for j in range(V.shape[1]):
        if V[np.argmax(np.abs(V[:, j])), j] < 0:
            V[:, j] = -V[:, j]
    return Xc @ V, mean, V


def _canonical_columns(vals: np.ndarray, vecs: np.ndarray, s: int) -> np.ndarray:
    order = np.argsort(vals)[::-1][:s]
    T = vecs[:, order].copy()
    for j in range(T.shape[1]):
        col = T[:, j]
        norm = np.linalg.norm(col)
        col = col / norm if norm else col
        if col[np.argmax(np.abs(col))] < 0:
            col = -col
        T[:, j] = col
    return T


def replay_pca(F: np.ndarray, s: int, party_seeds: tuple[int, int],
               cond_limit: float, retries: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plaintext replay of the secure compression with identical seeds.

    Draws the same per-party transform randomness (P, t, Z), applies the
    same resampling rule, and eigensolves the similar matrix Y with the
    general dense solver (a different algorithm from the secure path's
    power iteration) under the same order/sign convention, so the logical
    compression matrix comes out identical up to solver tolerance.
    """
    from .pca import pca_local_draws

    mean = F.mean(axis=0)
    Xc = F - mean
    d = F.shape[1]
    for attempt in range(retries):
        P1c, t1, Z1 = pca_local_draws(PartyId.P1, party_seeds[0], d, attempt)
        P2c, t2, Z2 = pca_local_draws(PartyId.P2, party_seeds[1], d, attempt)
        P, t, Z = P1c + P2c, t1 + t2, Z1 + Z2
        W = Z @ P
        if np.linalg.matrix_rank(W) < d or np.linalg.cond(W) > cond_limit:
            continue
        Y = t * np.linalg.inv(P) @ (Xc.T @ Xc) @ P
        vals, vecs = np.linalg.eig(Y)
        T = _canonical_columns(vals.real, vecs.real, s)
        V = P @ T
        V = V / np.sqrt((V ** 2).sum(axis=0))
        return Xc @ V, mean, V
    raise RuntimeError("plaintext PCA replay exhausted transform retries")


class _PlainRun:
    def __init__(self, label: str, ids: np.ndarray, X: np.ndarray, k: int):
        self.label = label
        self.ids = ids
        self.X = X
        self.k = k
        self.assign: np.ndarray | None = None
        self.centroids: np.ndarray | None = None
        self.done = False


def _plain_kmeans_multi(runs: list[_PlainRun], index_seed: int,
                        max_iters: int, log: DecisionLog) -> None:
    for run in runs:
        rng = derive_rng(index_seed, f"kmeans-init:{run.label}")
        pos = np.sort(rng.choice(len(run.ids), size=run.k, replace=False))
        run.centroids = run.X[pos].copy()
        log.add(f"kmeans_init:{run.label}", [int(run.ids[p]) for p in pos])
    for iteration in range(max_iters):
        active = [r for r in runs if not r.done]
        if not active:
            break
        for run in active:
            dists = ((run.X[:, None, :] - run.centroids[None, :, :]) ** 2).sum(axis=2)
            new_assign = np.array(
                [int(np.argsort(row, kind="stable")[0]) for row in dists],
                dtype=np.int64)
            reseeded = False
            for c in range(run.k):
                if not np.any(new_assign == c):
                    own = dists[np.arange(len(new_assign)), new_assign]
                    far = int(np.argsort(own, kind="stable")[-1])
                    run.centroids[c] = run.X[far].copy()
                    new_assign[far] = c
                    log.add(f"kmeans_reseed:{run.label}:{iteration}:{c}",
                            int(run.ids[far]))
                    reseeded = True
            log.add(f"kmeans_assign:{run.label}:{iteration}", new_assign.tolist())
            if not reseeded and run.assign is not None and np.array_equal(new_assign, run.assign):
                run.done = True
            run.assign = new_assign
            if not run.done:
                for c in range(run.k):
                    members = new_assign == c
                    if members.any():
                        run.centroids[c] = run.X[members].mean(axis=0)


def plain_hkm_build(X: np.ndarray, ids: np.ndarray, k: int, leaf_max: int,
                    index_seed: int, max_iters: int = KMEANS_MAX_ITERS,
                    log: DecisionLog | None = None) -> HkmIndex:
    log = log if log is not None else DecisionLog()
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
        runs = [_PlainRun(node.path, ids[pos], X[pos], min(k, len(pos)))
                for node, pos in to_split]
        _plain_kmeans_multi(runs, index_seed, max_iters, log)
        next_frontier = []
        for (node, pos), run in zip(to_split, runs):
            for c in range(run.k):
                members = pos[run.assign == c]
                child = HkmNode(f"{node.path}.{c}", centroid=run.centroids[c].copy())
                node.children.append(child)
                next_frontier.append((child, members))
        frontier = next_frontier
    else:
        for node, pos in frontier:
            node.leaf_ids = ids[pos]
            log.add(f"hkm_leaf:{node.path}", ids[pos].tolist())
    return HkmIndex(root, ids)


def plain_hkm_query(index: HkmIndex, F: np.ndarray, q: np.ndarray, m: int,
                    log: DecisionLog, qlabel: str):
    floor_count = 3 * m
    pq: list[tuple[float, int, HkmNode]] = []
    seq = 0
    collected: list[int] = []
    expanded: list[str] = []

    def expand(node: HkmNode):
        nonlocal seq
        cents = np.stack([child.centroid for child in node.children])
        dists = ((cents - q[None, :]) ** 2).sum(axis=1)
        expanded.append(node.path)
        for child, dist in zip(node.children, dists):
            heapq.heappush(pq, (float(dist), seq, child))
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
    dists = ((F[pos] - q[None, :]) ** 2).sum(axis=1)
    perm = np.argsort(dists, kind="stable")
    top = [int(collected[i]) for i in perm[:m]]
    log.add(f"top_m:{qlabel}", top)
    return top


class PlainLsh:
    def __init__(self, a: np.ndarray, b: np.ndarray, x: np.ndarray, w: float,
                 stored_h: np.ndarray, ids: np.ndarray):
        self.a = a
        self.b = b
        self.x = x
        self.w = w
        self.stored_h = stored_h
        self.ids = ids


def plain_lsh_functions(d: int, m_f: int, w: float, index_seed: int):
    """Logical (a, b, x): the sum of both parties' derived halves."""
    a = np.empty((m_f, d))
    b = np.empty(m_f)
    x = np.empty(m_f, dtype=np.int64)
    for j in range(m_f):
        a1 = derive_rng(index_seed, f"lsh-a:{int(PartyId.P1)}:{j}").normal(
            0.0, math.sqrt(0.5), size=d)
        a2 = derive_rng(index_seed, f"lsh-a:{int(PartyId.P2)}:{j}").normal(
            0.0, math.sqrt(0.5), size=d)
        a[j] = a1 + a2
        b[j] = derive_rng(index_seed, f"lsh-b:{j}").uniform(0.0, w)
        x[j] = int(derive_rng(index_seed, f"lsh-x:{j}").integers(1, 9))
    return a, b, x


def plain_c2lsh_build(F: np.ndarray, ids: np.ndarray, m_f: int, w: float,
                      index_seed: int, log: DecisionLog) -> PlainLsh:
    a, b, x = plain_lsh_functions(F.shape[1], m_f, w, index_seed)
    H = a @ F.T + (b * w * x)[:, None]
    buckets = np.floor(H / w).astype(np.int64)
    for j in range(m_f):
        table: dict[int, list[int]] = {}
        for col, image_id in enumerate(ids):
            table.setdefault(int(buckets[j, col]), []).append(int(image_id))
        log.add(f"lsh_table:{j}", {str(k): v for k, v in sorted(table.items())})
    return PlainLsh(a, b, x, w, H, ids)


def plain_c2lsh_query(index: PlainLsh, F: np.ndarray, q: np.ndarray, m: int,
                      alpha: float, log: DecisionLog, qlabel: str):
    hq = index.a @ q + index.b * index.w * index.x
    threshold = math.ceil(alpha * len(index.a))
    n = len(index.ids)
    need = min(3 * m, n)
    cand_mask = np.zeros(n, dtype=bool)
    level = 0
    for level in range(REHASH_MAX_LEVEL + 1):
        width = index.w * (2.0 ** level)
        collide = np.floor(index.stored_h / width) == np.floor(hq / width)[:, None]
        cand_mask = collide.sum(axis=0) >= threshold
        if int(cand_mask.sum()) >= need:
            break
    else:
        cand_mask[:] = True
    candidates = [int(i) for i in index.ids[cand_mask]]
    log.add(f"lsh_level:{qlabel}", level)
    log.add(f"lsh_candidates:{qlabel}", candidates)
    pos = np.flatnonzero(cand_mask)
    dists = ((F[pos] - q[None, :]) ** 2).sum(axis=1)
    perm = np.argsort(dists, kind="stable")
    top = [candidates[i] for i in perm[:m]]
    log.add(f"top_m:{qlabel}", top)
    return top


def plain_linear_query(F: np.ndarray, ids: np.ndarray, q: np.ndarray, m: int,
                       log: DecisionLog, qlabel: str):
    dists = ((F - q[None, :]) ** 2).sum(axis=1)
    perm = np.argsort(dists, kind="stable")
    top = [int(ids[i]) for i in perm[:m]]
    log.add(f"top_m:{qlabel}", top)
    return top


class PlaintextPipeline:
    """End-to-end plaintext run with the same seeds and decision rules."""

    def __init__(self, images: np.ndarray, ids, model: PublicModel, params):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.model = model
        self.params = params
        self.log = DecisionLog()
        self.features = np.stack([plaintext_infer(model, img) for img in images])
        if params.index_kind == "linear":
            self.proj, self.mean, self.basis = self.features, None, None
        else:
            from .pca import PCA_COND_LIMIT, PCA_RETRIES
            self.proj, self.mean, self.basis = replay_pca(
                self.features, params.s,
                (params.party1_seed, params.party2_seed),
                PCA_COND_LIMIT, PCA_RETRIES)
        self.index = None
        if params.index_kind == "hkm":
            self.index = plain_hkm_build(self.proj, self.ids, params.k,
                                         params.effective_leaf_max(),
                                         params.index_seed, log=self.log)
        elif params.index_kind == "c2lsh":
            self.index = plain_c2lsh_build(self.proj, self.ids, params.m_f,
                                           params.w, params.index_seed, self.log)

    def query(self, image: np.ndarray, m: int, qlabel: str) -> list[int]:
        feature = plaintext_infer(self.model, image)
        if self.params.index_kind == "linear":
            return plain_linear_query(self.features, self.ids, feature, m,
                                      self.log, qlabel)
        q = (feature - self.mean) @ self.basis
        if self.params.index_kind == "hkm":
            return plain_hkm_query(self.index, self.proj, q, m, self.log, qlabel)
        return plain_c2lsh_query(self.index, self.proj, q, m,
                                 self.params.alpha, self.log, qlabel)
