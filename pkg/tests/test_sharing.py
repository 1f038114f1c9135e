import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secir.errors import SameOwner, SecretOutOfRange, ShapeMismatch
from secir.numeric import DEFAULT_CONFIG, in_share_range
from secir.rng import derive_rng
from secir.sharing import (PartyId, Share, apply_share_correction, local_linear,
                           normalize_share, read_share_file, reconstruct,
                           split, write_share_file)

CFG = DEFAULT_CONFIG


def test_split_zero_secret():
    s1, s2 = split(0.0, 3)
    assert float(s1.values) == -float(s2.values)
    assert in_share_range(float(s1.values))
    assert reconstruct(s1, s2) == 0.0


def test_split_sum_constraint():
    s1, s2 = split(1.0, 4)
    assert abs((float(s1.values) + float(s2.values)) - 1.0) < 2.0 ** -16
    assert in_share_range(float(s1.values)) and in_share_range(float(s2.values))


def test_split_identity_matrix():
    eye = np.eye(2)
    s1, s2 = split(eye, 5)
    np.testing.assert_allclose(s1.values + s2.values, eye, atol=2.0 ** -16)
    assert s1.owner == PartyId.P1 and s2.owner == PartyId.P2


def test_split_rejects_large_secret():
    with pytest.raises(SecretOutOfRange):
        split(CFG.secret_hi * 1.01, 6)


def test_split_reconstruct_roundtrip_bulk():
    rng = np.random.default_rng(0)
    secrets = rng.uniform(-100, 100, 10_000)
    s1, s2 = split(secrets, 7)
    rec = reconstruct(s1, s2)
    assert np.max(np.abs(rec - secrets)) < 2.0 ** -16
    assert np.all(in_share_range(s1.values)) and np.all(in_share_range(s2.values))


@given(st.floats(min_value=-120, max_value=120), st.integers(min_value=0, max_value=2 ** 30))
@settings(max_examples=200, deadline=None)
def test_split_roundtrip_property(secret, seed):
    s1, s2 = split(secret, seed)
    assert abs(reconstruct(s1, s2) - secret) < 2.0 ** -16


def test_reconstruct_owner_and_shape_checks():
    s1, s2 = split(np.ones(3), 8)
    with pytest.raises(SameOwner):
        reconstruct(s1, s1)
    with pytest.raises(ShapeMismatch):
        reconstruct(s1, Share(PartyId.P2, np.ones(4)))


def test_reconstruction_linearity():
    rng = np.random.default_rng(1)
    x = rng.uniform(-50, 50, 64)
    y = rng.uniform(-50, 50, 64)
    x1, x2 = split(x, 9)
    y1, y2 = split(y, 10)
    alpha, beta = 1.25, -0.5
    lhs = reconstruct(Share(PartyId.P1, alpha * x1.values + beta * y1.values),
                      Share(PartyId.P2, alpha * x2.values + beta * y2.values))
    rhs = alpha * reconstruct(x1, x2) + beta * reconstruct(y1, y2)
    assert np.max(np.abs(lhs - rhs)) <= 4 * 2.0 ** -16


def test_local_linear_identity():
    s1, s2 = split(np.arange(4, dtype=float).reshape(2, 2) / 4, 11)
    out = local_linear(s1, A=np.eye(2), c=1.0)
    np.testing.assert_array_equal(out.values, s1.values)


def test_local_linear_scale():
    s1, s2 = split(3.0 * np.ones((1, 1)), 12)
    o1 = local_linear(s1, c=2.0)
    o2 = local_linear(s2, c=2.0)
    assert abs(float(o1.values + o2.values) - 6.0) < 8 * 2.0 ** -16


def test_local_linear_matches_plaintext_oracle():
    rng = np.random.default_rng(2)
    X = rng.uniform(-5, 5, (4, 3))
    A = rng.uniform(-1, 1, (2, 4))
    B = rng.uniform(-1, 1, (3, 5))
    c = 1.5
    s1, s2 = split(X, 13)
    o1 = local_linear(s1, A, B, c)
    o2 = local_linear(s2, A, B, c)
    expected = A @ X @ B * c
    assert np.max(np.abs((o1.values + o2.values) - expected)) <= 8 * 2.0 ** -16


def test_local_linear_shape_check():
    s1, _ = split(np.ones((2, 2)), 14)
    with pytest.raises(ShapeMismatch):
        local_linear(s1, A=np.ones((2, 3)))


def test_normalize_share_inside_range_unchanged():
    value, corr = normalize_share(1.0, CFG, 0)
    assert value == 1.0 and corr is None


def test_normalize_share_zero_unchanged():
    value, corr = normalize_share(0.0, CFG, 0)
    assert value == 0.0 and corr is None


def test_normalize_share_underflow_zeroed():
    value, corr = normalize_share(2.0 ** -12, CFG, 0)
    assert value == 0.0 and corr is None
    # error bound: both parties zeroing loses at most 2 * share_lo
    assert 2 * 2.0 ** -12 <= 2 * CFG.share_lo


def test_normalize_share_overflow_preserves_secret():
    # force an overflowing share pair: s1 huge, s2 = secret - s1
    secret = 5.0
    s1 = 300.0
    s2 = secret - s1
    new_s1, corr = normalize_share(s1, CFG, 42)
    assert corr is not None
    assert in_share_range(new_s1)
    new_s2 = apply_share_correction(s2, corr)
    assert abs((new_s1 + new_s2) - secret) < 1e-9


def test_split_distribution_sign_and_uniformity():
    from scipy import stats

    values = np.array([float(split(1.0, seed)[0].values) for seed in range(10_000)])
    assert (values > 0).any() and (values < 0).any()
    # log-magnitude should be close to uniform over the window exponent range
    exps = np.log2(np.abs(values))
    counts, _ = np.histogram(exps, bins=16, range=(-8.0, 8.0))
    assert counts.sum() == len(values)
    p = stats.chisquare(counts).pvalue
    assert p > 0.001


def test_exp_normal_alternative_law():
    s1, s2 = split(np.full(256, 2.0), 21, law="exp_normal")
    rec = reconstruct(s1, s2)
    assert np.max(np.abs(rec - 2.0)) < 2.0 ** -16


def test_share_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    share = Share(PartyId.P2, rng.uniform(-1, 1, (3, 4, 5)))
    path = tmp_path / "x.share"
    write_share_file(path, share)
    loaded = read_share_file(path)
    assert loaded.owner == PartyId.P2
    np.testing.assert_array_equal(loaded.values, share.values)


def test_share_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.share"
    path.write_bytes(b"WHAT" + b"\x00" * 16)
    with pytest.raises(ValueError):
        read_share_file(path)


def test_split_deterministic_under_seed():
    a1, a2 = split(np.linspace(-1, 1, 50), 99)
    b1, b2 = split(np.linspace(-1, 1, 50), 99)
    np.testing.assert_array_equal(a1.values, b1.values)
    np.testing.assert_array_equal(a2.values, b2.values)


def test_derive_rng_labels_independent():
    a = derive_rng(5, "x").standard_normal(4)
    b = derive_rng(5, "y").standard_normal(4)
    c = derive_rng(5, "x").standard_normal(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, c)
