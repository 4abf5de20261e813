import io

import numpy as np
import pytest

from covclust.errors import ContractViolation, EmptyInputError, ParseError
from covclust.sparse import (
    SparseBinaryMatrix,
    hamming_distance,
    ingest_triplets,
    iter_triplets,
    load_matrix,
    parse_triplet_lines,
    save_matrix,
    sparsity_report,
)

from _util import dense_of, random_sparse


def test_ingest_basic():
    records = [("u1", "s1", 3), ("u1", "s2", 1), ("u2", "s1", 5)]
    D, users, cats = ingest_triplets(records, min_count=1)
    assert (D.n_rows, D.n_cols) == (2, 2)
    assert D.row(0).tolist() == [0, 1]
    assert D.row(1).tolist() == [0]
    assert users.id_of(0) == "u1" and users.id_of(1) == "u2"
    assert cats.index_of("s2") == 1


def test_ingest_aggregates_duplicates_before_threshold():
    D, _, _ = ingest_triplets([("u1", "s1", 1), ("u1", "s1", 1)], min_count=2)
    assert D.row(0).tolist() == [0]


def test_ingest_zero_count_below_threshold():
    D, users, cats = ingest_triplets([("u1", "s1", 0)], min_count=1)
    assert (D.n_rows, D.n_cols) == (1, 1)
    assert D.nnz == 0
    assert len(users) == 1 and len(cats) == 1


def test_ingest_empty_stream():
    with pytest.raises(EmptyInputError):
        ingest_triplets([], min_count=1)


def test_parse_triplet_lines():
    text = "# comment\nu1\ts1\t2\n\nu2\ts1\t1\n"
    recs = list(parse_triplet_lines(io.StringIO(text)))
    assert recs == [("u1", "s1", 2), ("u2", "s1", 1)]


def test_parse_reports_line_numbers():
    with pytest.raises(ParseError) as exc:
        list(parse_triplet_lines(io.StringIO("u1\ts1\t1\nbroken line\n")))
    assert exc.value.line_number == 2


def test_parse_rejects_bad_count():
    with pytest.raises(ParseError):
        list(parse_triplet_lines(io.StringIO("u1\ts1\tmany\n")))


def test_matrix_invariants_enforced():
    with pytest.raises(ContractViolation):
        SparseBinaryMatrix([np.array([0, 0], dtype=np.int32)], 3)
    with pytest.raises(ContractViolation):
        SparseBinaryMatrix([np.array([3], dtype=np.int32)], 3)
    with pytest.raises(ContractViolation):
        SparseBinaryMatrix([np.array([2, 1], dtype=np.int32)], 3)


def test_hamming_examples():
    x = np.array([0, 2], dtype=np.int32)
    assert hamming_distance(x, x, 4) == 0.0
    y = np.array([0, 1], dtype=np.int32)
    assert hamming_distance(x, y, 4) == 0.5
    empty = np.array([], dtype=np.int32)
    full = np.array([0, 1, 2], dtype=np.int32)
    assert hamming_distance(empty, full, 3) == 1.0


def test_hamming_contract():
    with pytest.raises(ContractViolation):
        hamming_distance(np.array([5]), np.array([0]), 3)
    with pytest.raises(ContractViolation):
        hamming_distance(np.array([0]), np.array([0]), 0)


def test_hamming_metric_axioms_random():
    rng = np.random.default_rng(4)
    for _ in range(200):
        p = int(rng.integers(1, 12))
        pts = [
            np.flatnonzero(rng.random(p) < 0.5).astype(np.int32) for _ in range(3)
        ]
        x, y, z = pts
        dxy = hamming_distance(x, y, p)
        dyx = hamming_distance(y, x, p)
        assert dxy == dyx >= 0.0
        assert (dxy == 0.0) == (x.tolist() == y.tolist())
        # distances scale back to integer symmetric-difference sizes
        assert round(dxy * p) == pytest.approx(dxy * p, abs=1e-12)
        assert dxy <= hamming_distance(x, z, p) + hamming_distance(z, y, p) + 1e-12


def test_sparsity_report_examples():
    D = SparseBinaryMatrix(
        [np.array([0], dtype=np.int32), np.array([0, 1], dtype=np.int32)], 3
    )
    rep = sparsity_report(D)
    assert rep.row_sums.tolist() == [1, 2]
    assert rep.col_sums.tolist() == [2, 1, 0]
    assert rep.linf_D == 2 and rep.linf_Dt == 2
    assert rep.density == 3 / 6
    assert rep.density * D.n_rows * D.n_cols == D.nnz

    empty = SparseBinaryMatrix([np.array([], dtype=np.int32)] * 3, 3)
    rep = sparsity_report(empty)
    assert rep.density == 0.0 and rep.linf_D == 0

    full = SparseBinaryMatrix([np.array([0, 1], dtype=np.int32)] * 2, 2)
    rep = sparsity_report(full)
    assert rep.density == 1.0 and rep.row_sums.tolist() == [2, 2]


def test_triplet_round_trip():
    rng = np.random.default_rng(11)
    raw = [
        (f"u{rng.integers(8)}", f"s{rng.integers(12)}", int(rng.integers(1, 4)))
        for _ in range(60)
    ]
    D1, users1, cats1 = ingest_triplets(raw, min_count=1)
    D2, users2, cats2 = ingest_triplets(
        list(iter_triplets(D1, users1, cats1)), min_count=1
    )
    # first-appearance order differs between the two passes, so compare by id
    assert {users1.id_of(i) for i in range(len(users1))} == {
        users2.id_of(i) for i in range(len(users2))
    }
    for uid in users1.reverse:
        sup1 = {cats1.id_of(int(j)) for j in D1.row(users1.index_of(uid))}
        sup2 = {cats2.id_of(int(j)) for j in D2.row(users2.index_of(uid))}
        assert sup1 == sup2


def test_binary_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    D = random_sparse(rng, 30, 12, 0.25)
    path = tmp_path / "m.cvc"
    save_matrix(path, D)
    D2 = load_matrix(path)
    assert D == D2
    # file is stable byte-for-byte
    save_matrix(tmp_path / "m2.cvc", D2)
    assert (tmp_path / "m.cvc").read_bytes() == (tmp_path / "m2.cvc").read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.cvc"
    path.write_bytes(b"XXXX" + b"\0" * 24)
    with pytest.raises(ParseError):
        load_matrix(path)


def test_csc_arrays_match_dense():
    rng = np.random.default_rng(7)
    D = random_sparse(rng, 25, 18, 0.3)
    dense = dense_of(D)
    cols = D.columns()
    for k in range(D.n_cols):
        assert cols[k].tolist() == np.flatnonzero(dense[:, k]).tolist()
    assert D.col_sums().tolist() == dense.sum(axis=0).astype(int).tolist()
