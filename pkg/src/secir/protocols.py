"""Core two-party protocols over additive shares.

Each function is the party-side procedure of a symmetric protocol: both
parties call it with their own share values and a live session, and the
function returns that party's share of the result.  Round counts are fixed
contracts, independent of batch size:

    sec_mul / sec_mat_mul   1 round
    sec_cmp / sec_div       2 rounds
    sec_mat_inv / sec_sort  2 rounds
    sec_relu                3 rounds
    sec_maxpool4            6 rounds
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dealer import BeaverTriple, CmpTuple, SortTuple
from .errors import DivisorMaskedZero, ShapeMismatch, SingularInput, SingularW
from .session import PartySession
from .sharing import PartyId
from .transport import (TAG_SEC_CMP, TAG_SEC_DIV, TAG_SEC_MAT_INV,
                        TAG_SEC_MAT_MUL, TAG_SEC_MAXPOOL, TAG_SEC_MUL,
                        TAG_SEC_RELU, TAG_SEC_SORT)

MATINV_COND_LIMIT = 1e8
MATINV_RETRIES = 3
DIV_RETRIES = 3


def _f(x):
    return np.asarray(x, dtype=np.float64)


def _is_p2(sess: PartySession) -> float:
    return 1.0 if sess.party == PartyId.P2 else 0.0


# -- multiplication ---------------------------------------------------------


def _mul_core(sess: PartySession, x, y, triple: BeaverTriple | None = None):
    """Elementwise Beaver product; one masked exchange."""
    x, y = _f(x), _f(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    if triple is None:
        triple = sess.material.take_triples(x.shape)
    a, b, c = _f(triple.a), _f(triple.b), _f(triple.c)
    e_mine = x - a
    f_mine = y - b
    e_theirs, f_theirs = sess.exchange_masked(e_mine, f_mine)
    e = e_mine + e_theirs
    f = f_mine + f_theirs
    return f * a + e * b + c + _is_p2(sess) * e * f


def sec_mul(sess: PartySession, x, y, triple: BeaverTriple | None = None):
    """Share of x*y (elementwise for arrays); exactly one round."""
    with sess.protocol(TAG_SEC_MUL):
        return _mul_core(sess, x, y, triple)


def _mat_mul_core(sess: PartySession, X, Y, triple: BeaverTriple | None = None,
                  defer=False):
    """Matrix Beaver product.  With ``defer`` the masked exchange is left to
    the caller so several products can share one round; returns the pieces
    instead of the result."""
    X, Y = _f(X), _f(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[0]:
        raise ShapeMismatch(f"{X.shape} @ {Y.shape}")
    if triple is None:
        triple = sess.material.take_matmul(X.shape[0], X.shape[1], Y.shape[1])
    A, B, C = triple.a, triple.b, triple.c
    if A.shape != X.shape or B.shape != Y.shape:
        raise ShapeMismatch("triple shape does not match operands")
    E_mine = X - A
    F_mine = Y - B
    if defer:
        return E_mine, F_mine, (X, Y, A, B, C)
    E_theirs, F_theirs = sess.exchange_masked(E_mine, F_mine)
    return _mat_mul_finish(sess, E_mine + E_theirs, F_mine + F_theirs, (X, Y, A, B, C))


def _mat_mul_finish(sess: PartySession, E, F, ctx):
    X, Y, A, B, C = ctx
    return X @ F + E @ Y + C - _is_p2(sess) * (E @ F)


def sec_mat_mul(sess: PartySession, X, Y, triple: BeaverTriple | None = None):
    """Share of the matrix product X @ Y; exactly one round."""
    with sess.protocol(TAG_SEC_MAT_MUL):
        return _mat_mul_core(sess, X, Y, triple)


# -- comparison and selection ----------------------------------------------


def _cmp_core(sess: PartySession, u, v, tup: CmpTuple | None = None):
    u, v = _f(u), _f(v)
    if u.shape != v.shape:
        raise ShapeMismatch(f"{u.shape} vs {v.shape}")
    if tup is None:
        tup = sess.material.take_cmp(u.shape)
    diff = u - v
    masked = _mul_core(sess, diff, _f(tup.r)) + _f(tup.k)
    f = sess.reveal("f", masked)
    # f == 0 (a tie hidden by the mask) deterministically takes the else
    # branch, same as a negative f.
    return np.where(_f(f) > 0.0, _f(tup.sgn_r), 0.5 - _f(tup.sgn_r))


def sec_cmp(sess: PartySession, u, v, tup: CmpTuple | None = None):
    """Share of the positivity indicator of (u - v); exactly two rounds.

    Reconstructs 1 where u > v and 0 otherwise, provided |u - v| exceeds
    the configured mask ratio eta; inside that window either answer may
    come out.  The only value made public is the masked difference f.
    """
    with sess.protocol(TAG_SEC_CMP):
        out = _cmp_core(sess, u, v, tup)
    return out if _f(u).shape else float(out)


def sec_relu(sess: PartySession, x):
    """Share of max(x, 0) elementwise over any batch; exactly three rounds."""
    with sess.protocol(TAG_SEC_RELU):
        x = _f(x)
        sgn = _cmp_core(sess, x, np.zeros_like(x))
        return _mul_core(sess, x, sgn)


def sec_maxpool4(sess: PartySession, x1, x2, x3, x4):
    """Share of max(x1..x4) elementwise (a 2x2 block per lane); six rounds.

    Two comparison stages and two selection stages; all lanes ride the same
    frames, so the round count is independent of the batch size.
    """
    with sess.protocol(TAG_SEC_MAXPOOL):
        x1, x2, x3, x4 = _f(x1), _f(x2), _f(x3), _f(x4)
        shape = x1.shape
        for other in (x2, x3, x4):
            if other.shape != shape:
                raise ShapeMismatch("pool lanes differ in shape")
        # stage 1: sgn(x1-x2) and sgn(x3-x4) in one batched comparison
        s = _cmp_core(sess, np.concatenate([x1.ravel(), x3.ravel()]),
                      np.concatenate([x2.ravel(), x4.ravel()]))
        n = x1.size
        s12, s34 = s[:n], s[n:]
        # stage 2: both pairwise maxima with one batched multiplication
        sel = np.concatenate([s12, 0.5 - s12, s34, 0.5 - s34])
        vals = np.concatenate([x1.ravel(), x2.ravel(), x3.ravel(), x4.ravel()])
        prod = _mul_core(sess, sel, vals)
        max12 = prod[:n] + prod[n:2 * n]
        max34 = prod[2 * n:3 * n] + prod[3 * n:]
        # stage 3: final comparison and selection
        s1234 = _cmp_core(sess, max12, max34)
        sel2 = np.concatenate([s1234, 0.5 - s1234])
        vals2 = np.concatenate([max12, max34])
        prod2 = _mul_core(sess, sel2, vals2)
        out = prod2[:n] + prod2[n:]
        return out.reshape(shape)


# -- division and inversion -------------------------------------------------


def sec_div(sess: PartySession, u, v):
    """Share of u / v; exactly two rounds on the non-retry path.

    Both parties contribute a local positive factor r_i; u*r and v*r are
    computed in one batched round, the masked divisor g = v*r is revealed,
    and each party outputs its share of u*r divided by the public g.
    Reveals only g.  Elements whose |g| lands at or below the share-range
    floor are retried with fresh r; persistent failures raise
    DivisorMaskedZero.
    """
    with sess.protocol(TAG_SEC_DIV):
        u, v = _f(u), _f(v)
        if u.shape != v.shape:
            raise ShapeMismatch(f"{u.shape} vs {v.shape}")
        scalar = u.ndim == 0
        u1, v1 = np.atleast_1d(u).copy(), np.atleast_1d(v).copy()
        out = np.empty_like(u1)
        todo = np.arange(u1.size)
        for _ in range(DIV_RETRIES):
            uu, vv = u1.ravel()[todo], v1.ravel()[todo]
            r = sess.local_rng.uniform(0.5, 1.0, size=uu.shape)
            prods = _mul_core(sess, np.concatenate([uu, vv]), np.concatenate([r, r]))
            f_share, g_share = prods[:uu.size], prods[uu.size:]
            g = _f(sess.reveal("g", g_share))
            ok = np.abs(g) > sess.cfg.share_lo
            out.ravel()[todo[ok]] = f_share[ok] / g[ok]
            todo = todo[~ok]
            if todo.size == 0:
                return float(out[0]) if scalar else out.reshape(u.shape)
        raise DivisorMaskedZero(
            f"{todo.size} masked divisor(s) below the share-range floor after retries")


def sec_mat_inv(sess: PartySession, X):
    """Share of X^-1 via a random left mask; exactly two rounds per attempt.

    Each party samples a local random Z_i; W = (Z1+Z2) @ X is computed with
    one Beaver round, revealed (the only reveal), checked for rank and
    conditioning, and each party returns W^-1 @ Z_i.  A bad W triggers a
    fresh Z; persistent failure means X itself is singular.
    """
    with sess.protocol(TAG_SEC_MAT_INV):
        X = _f(X)
        if X.ndim != 2 or X.shape[0] != X.shape[1]:
            raise ShapeMismatch(f"square matrix required, got {X.shape}")
        n = X.shape[0]
        last = None
        for _ in range(MATINV_RETRIES):
            Z = sess.local_rng.uniform(-1.0, 1.0, size=(n, n))
            W_share = _mat_mul_core(sess, Z, X)
            W = sess.reveal("W", W_share)
            if np.linalg.matrix_rank(W) < n or np.linalg.cond(W) > MATINV_COND_LIMIT:
                last = SingularW(f"masked product is ill-conditioned (n={n})")
                continue
            return np.linalg.inv(W) @ Z
        raise SingularInput("matrix inversion retries exhausted") from last


# -- sorting ----------------------------------------------------------------


@dataclass(frozen=True)
class SortResult:
    """Ascending permutation plus this party's permuted shares.

    ``masked`` holds the public masked values t*u + k, usable as order keys
    across sorts that shared the same tuple.
    """

    perm: np.ndarray
    values: np.ndarray
    masked: np.ndarray


def sec_sort_many(sess: PartySession, groups, tuples=None) -> list[SortResult]:
    """Sort several share arrays with one pair of rounds.

    Each group gets its own (t, k) tuple unless explicit tuples are given;
    a single tuple may be shared across groups when their masked values
    must stay mutually comparable.
    """
    with sess.protocol(TAG_SEC_SORT):
        groups = [np.atleast_1d(_f(g)) for g in groups]
        if tuples is None:
            tuples = [sess.material.take_sort() for _ in groups]
        elif isinstance(tuples, SortTuple):
            tuples = [tuples] * len(groups)
        t_full = np.concatenate([np.full(g.shape, tup.t) for g, tup in zip(groups, tuples)])
        k_full = np.concatenate([np.full(g.shape, tup.k) for g, tup in zip(groups, tuples)])
        u_full = np.concatenate(groups)
        masked = _mul_core(sess, t_full, u_full) + k_full
        f = _f(sess.reveal("f", masked))
        out = []
        offset = 0
        for g in groups:
            fg = f[offset:offset + g.size]
            perm = np.argsort(fg, kind="stable")
            out.append(SortResult(perm, g[perm], fg))
            offset += g.size
        return out


def sec_sort(sess: PartySession, u, tup: SortTuple | None = None) -> SortResult:
    """Ascending order of shared values; exactly two rounds.

    Reveals only the masked array t*u + k (one positive t and one k for the
    whole array, so the revealed order equals the true order).
    """
    return sec_sort_many(sess, [u], None if tup is None else [tup])[0]
