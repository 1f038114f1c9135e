"""Secure principal-component compression of a shared feature matrix.

The parties jointly build Y = t * Pinv @ (Xc^T Xc) @ P for local random P
and positive t, reveal Y to party one, which eigensolves it locally and
returns the top-s eigenvector matrix T; V = P @ T then spans the top-s
eigenspace of the centered Gram matrix.  Column norms are fixed with one
elementwise product round and one public reveal of the squared column sums.
The whole protocol takes eight interaction rounds; the values made public
are exactly W (inside the inversion step), Y, T and the column-sum vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EigensolverNoConverge, ShapeMismatch, SingularP
from .protocols import _mat_mul_core, _mat_mul_finish, sec_mat_mul
from .rng import derive_rng
from .session import PartySession
from .sharing import PartyId, open_share_section, read_array, read_share_header, write_array
from .transport import TAG_SEC_MAT_INV, TAG_SEC_PCA

PCA_COND_LIMIT = 1e6
PCA_RETRIES = 3
POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000


@dataclass(frozen=True)
class PcaState:
    """One party's compression state: mean vector and compression matrix."""

    mean: np.ndarray  # (d,)
    comp: np.ndarray  # (d, s), columns of the reconstructed matrix are unit

    def save(self, path, owner: PartyId) -> None:
        with open(path, "wb") as fh:
            open_share_section(fh, owner, b"PCAS")
            write_array(fh, self.mean)
            write_array(fh, self.comp)

    @classmethod
    def load(cls, path) -> tuple["PcaState", PartyId]:
        with open(path, "rb") as fh:
            owner, tag = read_share_header(fh)
            if tag != b"PCAS":
                raise ValueError(f"expected PCAS section, found {tag!r}")
            return cls(read_array(fh), read_array(fh)), owner


def _power_iteration(M: np.ndarray, rng, tol: float, max_iter: int):
    """Dominant (eigenvalue, unit eigenvector) of a real matrix with a
    real nonnegative spectrum."""
    v = rng.standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    floor = 1e-12 * max(1.0, float(np.abs(np.trace(M))))
    for _ in range(max_iter):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        v = w / norm
        lam = float(v @ (M @ v))
        if np.linalg.norm(M @ v - lam * v) <= tol * max(abs(lam), floor):
            return lam, v
    raise EigensolverNoConverge(f"power iteration did not reach tol={tol}")


def top_eigenvectors(Y: np.ndarray, s: int, rng,
                     tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> np.ndarray:
    """Top-s right eigenvectors of Y by power iteration with deflation.

    Y is similar to a symmetric PSD matrix, so its spectrum is real and
    nonnegative but Y itself is not symmetric; deflation therefore uses the
    matching left eigenvector (power iteration on Y^T).  Columns come back
    in descending eigenvalue order with a deterministic sign (largest
    component positive).
    """
    work = np.array(Y, dtype=np.float64, copy=True)
    cols = []
    for _ in range(s):
        lam, v = _power_iteration(work, rng, tol, max_iter)
        _, w = _power_iteration(work.T, rng, tol, max_iter)
        wv = float(w @ v)
        if wv == 0.0:
            raise EigensolverNoConverge("left/right eigenvectors are orthogonal")
        work = work - lam * np.outer(v, w) / wv
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        cols.append(v)
    return np.column_stack(cols)


def sec_pca(sess: PartySession, X, s: int) -> tuple[np.ndarray, PcaState]:
    """Compress shared features X (n x d) to n x s; at most eight rounds.

    Returns this party's share of the projected matrix and its half of the
    (mean, compression) state used later for queries.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch("feature matrix must be 2-D")
    n, d = X.shape
    if not (n > d >= s >= 1):
        raise ShapeMismatch(f"need n > d >= s >= 1, got n={n} d={d} s={s}")

    with sess.protocol(TAG_SEC_PCA):
        mean = X.mean(axis=0)
        Xc = X - mean
        last_err = None
        for attempt in range(PCA_RETRIES):
            try:
                F, comp = _pca_attempt(sess, Xc, n, d, s, attempt)
            except SingularP as exc:
                last_err = exc
                continue
            return F, PcaState(mean, comp)
        raise SingularP("PCA transform resampling failed") from last_err


def pca_local_draws(party: PartyId, party_seed: int, d: int, attempt: int):
    """This party's transform randomness (P, t, Z) for one attempt.

    Drawn from a dedicated derived stream so the plaintext replay can
    reproduce the exact draws without tracking other protocol usage.
    """
    rng = derive_rng(party_seed, f"pca:{int(party)}:{attempt}")
    P = rng.uniform(-1.0, 1.0, size=(d, d))
    t = rng.uniform(0.5, 1.0)
    Z = rng.uniform(-1.0, 1.0, size=(d, d))
    return P, t, Z


def _pca_attempt(sess: PartySession, Xc, n: int, d: int, s: int, attempt: int):
    is_p2 = 1.0 if sess.party == PartyId.P2 else 0.0
    P, t, Z = pca_local_draws(sess.party, sess.party_seed, d, attempt)
    # round 1: masked pieces of W = Z @ P and of Xc^T @ Xc share a frame
    Ew, Fw, ctx_w = _mat_mul_core(sess, Z, P, defer=True)
    Eg, Fg, ctx_g = _mat_mul_core(sess, Xc.T, Xc, defer=True)
    peers = sess.exchange_masked(Ew, Fw, Eg, Fg)
    W_share = _mat_mul_finish(sess, Ew + peers[0], Fw + peers[1], ctx_w)
    XtX = _mat_mul_finish(sess, Eg + peers[2], Fg + peers[3], ctx_g)

    # round 2: reveal W while exchanging masked pieces of (XtX @ P);
    # the reveal belongs to the nested inversion step
    Eh, Fh, ctx_h = _mat_mul_core(sess, XtX, P, defer=True)
    with sess.protocol(TAG_SEC_MAT_INV):
        peer_masked, revealed = sess.exchange_round(
            masked=[Eh, Fh], reveal=[("W", W_share)])
    W = revealed[0]
    if np.linalg.matrix_rank(W) < d or np.linalg.cond(W) > PCA_COND_LIMIT:
        raise SingularP("masked transform W is ill-conditioned")
    XtXP = _mat_mul_finish(sess, Eh + peer_masked[0], Fh + peer_masked[1], ctx_h)
    Pinv = np.linalg.inv(W) @ Z

    # round 3: M = Pinv @ (XtX @ P)
    M = _mat_mul_core(sess, Pinv, XtXP)

    # round 4: Y = t * M, elementwise with a broadcast scalar share
    trip = sess.material.take_triples((d, d))
    t_full = np.full((d, d), t)
    e_mine, f_mine = t_full - trip.a, M - trip.b
    (e_t, f_t), _ = sess.exchange_round(masked=[e_mine, f_mine])
    e, f = e_mine + e_t, f_mine + f_t
    Y_share = f * trip.a + e * trip.b + trip.c + is_p2 * e * f

    # rounds 5-6: reveal Y to party one, eigensolve there, send T back
    if sess.party == PartyId.P1:
        Y = sess.reveal_to(PartyId.P1, "Y", Y_share)
        T = top_eigenvectors(Y, s, derive_rng(sess.party_seed, f"pca-eig:{attempt}"))
        sess.send_plain("T", T)
    else:
        sess.reveal_to(PartyId.P1, "Y", Y_share)
        T = sess.recv_plain("T", (d, s))
    V = P @ T

    # round 7: squared entries of V and masked pieces of G = Xc @ V together
    trip_u = sess.material.take_triples((d, s))
    eu_mine, fu_mine = V - trip_u.a, V - trip_u.b
    Egf, Fgf, ctx_f = _mat_mul_core(sess, Xc, V, defer=True)
    peers = sess.exchange_masked(eu_mine, fu_mine, Egf, Fgf)
    eu, fu = eu_mine + peers[0], fu_mine + peers[1]
    U = fu * trip_u.a + eu * trip_u.b + trip_u.c + is_p2 * eu * fu
    G = _mat_mul_finish(sess, Egf + peers[2], Fgf + peers[3], ctx_f)

    # round 8: reveal the squared column sums and normalize locally;
    # scaling by the public 1/sqrt(r) commutes with the projection
    r = np.asarray(sess.reveal("r", U.sum(axis=0)), dtype=np.float64)
    if np.any(r <= 0):
        raise SingularP("nonpositive squared column sum")
    inv_norm = 1.0 / np.sqrt(r)
    return G * inv_norm, V * inv_norm


def compress_query(sess: PartySession, q, state: PcaState) -> np.ndarray:
    """Project a shared query vector with the stored state; one round."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != state.mean.shape:
        raise ShapeMismatch(f"query {q.shape} vs mean {state.mean.shape}")
    centered = (q - state.mean).reshape(1, -1)
    return sec_mat_mul(sess, centered, state.comp).ravel()
