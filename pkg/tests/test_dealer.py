import numpy as np
import pytest

from secir.dealer import (MaterialStream, ThroughputReport, gen_cmp_tuples,
                          gen_sort_tuples, gen_triples, generate_material_files,
                          matmul_key, throughput_report, triple_from_secrets)
from secir.errors import DurationTooShort, MaterialExhausted
from secir.numeric import DEFAULT_CONFIG
from secir.sharing import PartyId

CFG = DEFAULT_CONFIG


def test_forced_scalar_triple():
    t1, t2 = triple_from_secrets(1.0, 2.0)
    assert abs((t1.a + t2.a) - 1.0) < 1e-9
    assert abs((t1.b + t2.b) - 2.0) < 1e-9
    assert abs((t1.c + t2.c) - 2.0) < 1e-9


def test_identity_matmul_triple_semantics():
    # with A reconstructing to I, C must reconstruct to B
    cols1, cols2 = gen_triples(4, shape=(3, 3, 2), rng_seed=5)
    for (A1, B1, C1), (A2, B2, C2) in zip(cols1, cols2):
        A, B, C = A1 + A2, B1 + B2, C1 + C2
        np.testing.assert_allclose(A @ B, C, atol=1e-9)


def test_bulk_matrix_triples_product_oracle():
    count = 1000
    cols1, cols2 = gen_triples(count, shape=(4, 8, 2), rng_seed=6)
    worst = 0.0
    for (A1, B1, C1), (A2, B2, C2) in zip(cols1, cols2):
        err = np.max(np.abs((A1 + A2) @ (B1 + B2) - (C1 + C2)))
        worst = max(worst, err)
    assert worst <= 8 * 2.0 ** -16


def test_scalar_triples_product_oracle():
    (a1, b1, c1), (a2, b2, c2) = gen_triples(10_000, rng_seed=7)
    err = np.abs((a1 + a2) * (b1 + b2) - (c1 + c2))
    assert float(err.max()) <= 8 * 2.0 ** -16


def test_cmp_tuples_invariants():
    (r1, s1, k1), (r2, s2, k2) = gen_cmp_tuples(10_000, rng_seed=8)
    r, s, k = r1 + r2, s1 + s2, k1 + k2
    assert np.all(r != 0)
    expected_sgn = (r > 0).astype(float)
    assert np.max(np.abs(s - expected_sgn)) < 1e-9  # sign indicator of r
    assert (r > 0).any() and (r < 0).any()
    assert np.all(np.abs(k) <= CFG.eta * np.abs(r) + 1e-12)


def test_sort_tuples_invariants():
    (t1, k1), (t2, k2) = gen_sort_tuples(10_000, rng_seed=9)
    t, k = t1 + t2, k1 + k2
    assert np.all(t > 0)
    assert np.all(np.abs(k) <= CFG.eta * t + 1e-12)


def test_sort_tuple_unit_case():
    stream = MaterialStream.lazy(PartyId.P1, 10, CFG)
    peer = MaterialStream.lazy(PartyId.P2, 10, CFG)
    mine, theirs = stream.take_sort(), peer.take_sort()
    assert mine.t + theirs.t > 0


def test_streams_are_consistent_halves():
    s1 = MaterialStream.lazy(PartyId.P1, 11, CFG)
    s2 = MaterialStream.lazy(PartyId.P2, 11, CFG)
    t1 = s1.take_triples((64,))
    t2 = s2.take_triples((64,))
    np.testing.assert_allclose((t1.a + t2.a) * (t1.b + t2.b), t1.c + t2.c, atol=1e-9)
    c1 = s1.take_cmp((16,))
    c2 = s2.take_cmp((16,))
    assert np.all((c1.r + c2.r) != 0)


def test_stream_determinism():
    take = lambda seed: MaterialStream.lazy(PartyId.P1, seed, CFG).take_triples((128,))
    a, b = take(12), take(12)
    np.testing.assert_array_equal(a.a, b.a)
    np.testing.assert_array_equal(a.c, b.c)


def test_capacity_exhaustion_is_error():
    stream = MaterialStream.lazy(PartyId.P1, 13, CFG, capacity={"triple": 100})
    stream.take_triples((60,))
    with pytest.raises(MaterialExhausted):
        stream.take_triples((60,))


def test_file_roundtrip_and_exhaustion(tmp_path):
    counts = {"triple": 50, "cmp": 20, "sort": 5, matmul_key(2, 3, 2): 2}
    p1_path, p2_path = generate_material_files(14, counts, tmp_path)
    s1 = MaterialStream.from_file(p1_path)
    s2 = MaterialStream.from_file(p2_path)
    t1, t2 = s1.take_triples((50,)), s2.take_triples((50,))
    np.testing.assert_allclose((t1.a + t2.a) * (t1.b + t2.b), t1.c + t2.c, atol=1e-9)
    m1, m2 = s1.take_matmul(2, 3, 2), s2.take_matmul(2, 3, 2)
    np.testing.assert_allclose((m1.a + m2.a) @ (m1.b + m2.b), m1.c + m2.c, atol=1e-9)
    with pytest.raises(MaterialExhausted):
        s1.take_triples((1,))  # file stream never wraps around


def test_file_determinism(tmp_path):
    counts = {"triple": 64, "sort": 8}
    a1, _ = generate_material_files(15, counts, tmp_path / "a")
    b1, _ = generate_material_files(15, counts, tmp_path / "b")
    assert open(a1, "rb").read() == open(b1, "rb").read()


def test_file_and_lazy_agree(tmp_path):
    counts = {"cmp": 32}
    p1_path, _ = generate_material_files(16, counts, tmp_path)
    from_file = MaterialStream.from_file(p1_path).take_cmp((32,))
    lazy = MaterialStream.lazy(PartyId.P1, 16, CFG).take_cmp((32,))
    np.testing.assert_array_equal(from_file.r, lazy.r)
    np.testing.assert_array_equal(from_file.k, lazy.k)


def test_throughput_duration_guard():
    with pytest.raises(DurationTooShort):
        throughput_report("triple", 0.0)


def test_throughput_report_format_and_ordering():
    scalar = throughput_report("triple", 0.05)
    matrix = throughput_report("matmul", 0.05, shape=(512, 8, 1))
    assert isinstance(scalar, ThroughputReport)
    assert scalar.kind == "triple" and scalar.count > 0 and scalar.rate > 0
    # per-tuple work is far larger for 512x8 matrices
    assert scalar.rate > matrix.rate
