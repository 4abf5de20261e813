"""Sparse binary matrix core: storage, ingestion, distance and diagnostics.

The observation matrix is stored in row-set form (per row, the sorted column
indices that are set). All later stages work off this representation; a
column-sum accumulator is kept from construction so samplers never need a
transpose.
"""

import json
from dataclasses import dataclass

import numpy as np

from ._binio import read_rowset_file, write_rowset_file
from .errors import ContractViolation, EmptyInputError, ParseError

MATRIX_MAGIC = b"CVC1"

_EMPTY_ROW = np.empty(0, dtype=np.int32)


class SparseBinaryMatrix:
    """Immutable n_rows x n_cols binary matrix in compressed row-set form.

    ``rows`` (the constructor input) is one sorted, duplicate-free array of
    set column indices per row. Internally rows are packed CSR-style into a
    single index buffer, so the object is cheap to share and hash.
    """

    __slots__ = ("n_rows", "n_cols", "_indptr", "_indices", "_col_sums", "_csc")

    def __init__(self, rows, n_cols):
        n_cols = int(n_cols)
        if n_cols < 0:
            raise ContractViolation("n_cols must be non-negative")
        lengths = np.fromiter((len(r) for r in rows), dtype=np.int64, count=len(rows))
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        indices = np.empty(indptr[-1], dtype=np.int32)
        col_sums = np.zeros(n_cols, dtype=np.int64)
        for i, r in enumerate(rows):
            arr = np.asarray(r, dtype=np.int32)
            if arr.size:
                if arr[0] < 0 or arr[-1] >= n_cols:
                    raise ContractViolation(
                        f"row {i}: column index out of range [0, {n_cols})"
                    )
                if np.any(np.diff(arr) <= 0):
                    raise ContractViolation(
                        f"row {i}: indices must be strictly increasing"
                    )
                np.add.at(col_sums, arr, 1)
            indices[indptr[i] : indptr[i + 1]] = arr
        self.n_rows = len(rows)
        self.n_cols = n_cols
        self._indptr = indptr
        self._indices = indices
        self._col_sums = col_sums
        self._csc = None

    @property
    def nnz(self):
        return int(self._indptr[-1])

    def row(self, i):
        """Sorted set-column indices of row i (read-only view)."""
        if not 0 <= i < self.n_rows:
            raise ContractViolation(f"row index {i} out of range [0, {self.n_rows})")
        v = self._indices[self._indptr[i] : self._indptr[i + 1]]
        v.flags.writeable = False
        return v

    def rows(self):
        return [self.row(i) for i in range(self.n_rows)]

    def row_sums(self):
        return np.diff(self._indptr).astype(np.int64)

    def col_sums(self):
        return self._col_sums.copy()

    def csc_arrays(self):
        """Column-major view: (col_indptr, row_ids), both cached.

        ``row_ids[col_indptr[k]:col_indptr[k+1]]`` are the sorted rows with
        column k set.
        """
        if self._csc is None:
            order = np.argsort(self._indices, kind="stable")
            row_of = np.repeat(
                np.arange(self.n_rows, dtype=np.int32), np.diff(self._indptr)
            )
            starts = np.zeros(self.n_cols + 1, dtype=np.int64)
            np.cumsum(self._col_sums, out=starts[1:])
            self._csc = (starts, row_of[order])
        return self._csc

    def columns(self):
        """Per-column sorted row indices."""
        starts, rows = self.csc_arrays()
        return [rows[starts[k] : starts[k + 1]] for k in range(self.n_cols)]

    def row_major_arrays(self):
        """Row-major view: (indptr, col_indices), read-only."""
        return self._indptr, self._indices

    def take_rows(self, row_ids):
        """New matrix holding the given rows, in the given order."""
        return SparseBinaryMatrix([self.row(int(i)).copy() for i in row_ids], self.n_cols)

    def row_mask(self, i):
        """Dense boolean indicator of row i, length n_cols."""
        mask = np.zeros(self.n_cols, dtype=bool)
        mask[self.row(i)] = True
        return mask

    def __eq__(self, other):
        if not isinstance(other, SparseBinaryMatrix):
            return NotImplemented
        return (
            self.n_rows == other.n_rows
            and self.n_cols == other.n_cols
            and np.array_equal(self._indptr, other._indptr)
            and np.array_equal(self._indices, other._indices)
        )

    def __repr__(self):
        return (
            f"SparseBinaryMatrix(n_rows={self.n_rows}, n_cols={self.n_cols}, "
            f"nnz={self.nnz})"
        )


class EntityCatalog:
    """Dense bijection between external ids and matrix indices."""

    __slots__ = ("kind", "forward", "reverse")

    def __init__(self, ids, kind):
        if kind not in ("user", "category"):
            raise ContractViolation(f"unknown catalog kind {kind!r}")
        self.kind = kind
        self.reverse = list(ids)
        self.forward = {ext: i for i, ext in enumerate(self.reverse)}
        if len(self.forward) != len(self.reverse):
            raise ContractViolation("duplicate external ids in catalog")

    def __len__(self):
        return len(self.reverse)

    def index_of(self, external_id):
        return self.forward[external_id]

    def id_of(self, index):
        return self.reverse[index]

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.reverse, fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def from_json(cls, path, kind):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), kind)


@dataclass
class SparsityReport:
    row_sums: np.ndarray
    col_sums: np.ndarray
    linf_D: int      # max row sum, the L-inf norm of the matrix
    linf_Dt: int     # max column sum, the L-inf norm of its transpose
    density: float


def parse_triplet_lines(lines):
    """Yield (user_id, item_id, count) from tab-separated text lines.

    Lines starting with '#' and blank lines are skipped. Malformed lines
    raise ParseError with their 1-based line number.
    """
    saw_any = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(
                f"expected 3 tab-separated fields, got {len(parts)}", lineno
            )
        user, item, count_s = parts
        try:
            count = int(count_s)
        except ValueError:
            raise ParseError(f"count {count_s!r} is not an integer", lineno) from None
        if count < 0:
            raise ParseError(f"count must be non-negative, got {count}", lineno)
        saw_any = True
        yield user, item, count
    if not saw_any:
        raise EmptyInputError("no triplet records in input")


def ingest_triplets(records, min_count=1):
    """Build the binary observation matrix from (user, item, count) records.

    Duplicate (user, item) pairs are summed before thresholding; a cell is
    set iff the aggregate count reaches ``min_count``. Users and items are
    indexed in order of first appearance, so ingestion is deterministic.

    Returns (matrix, user_catalog, category_catalog).
    """
    if min_count < 1:
        raise ContractViolation(f"min_count must be >= 1, got {min_count}")
    user_ids = {}
    item_ids = {}
    counts = {}
    saw_any = False
    for rec_no, (user, item, count) in enumerate(records, start=1):
        if count < 0:
            raise ParseError(f"count must be non-negative, got {count}", rec_no)
        saw_any = True
        ui = user_ids.setdefault(user, len(user_ids))
        ii = item_ids.setdefault(item, len(item_ids))
        key = (ui, ii)
        counts[key] = counts.get(key, 0) + int(count)
    if not saw_any:
        raise EmptyInputError("no triplet records in input")

    row_cols = [[] for _ in range(len(user_ids))]
    for (ui, ii), total in counts.items():
        if total >= min_count:
            row_cols[ui].append(ii)
    rows = [np.sort(np.asarray(c, dtype=np.int32)) if c else _EMPTY_ROW for c in row_cols]
    matrix = SparseBinaryMatrix(rows, len(item_ids))
    users = EntityCatalog(list(user_ids), kind="user")
    categories = EntityCatalog(list(item_ids), kind="category")
    return matrix, users, categories


def iter_triplets(matrix, users, categories):
    """Re-emit the matrix as (user_id, item_id, 1) triplets."""
    for i in range(matrix.n_rows):
        uid = users.id_of(i)
        for j in matrix.row(i):
            yield uid, categories.id_of(int(j)), 1


def hamming_distance(x, y, p):
    """Normalized Hamming distance |x XOR y| / p between two index sets."""
    if p < 1:
        raise ContractViolation(f"dimension p must be >= 1, got {p}")
    x = np.asarray(x)
    y = np.asarray(y)
    if (x.size and x[-1] >= p) or (y.size and y[-1] >= p):
        raise ContractViolation("index set does not fit in dimension p")
    common = np.intersect1d(x, y, assume_unique=True).size
    return (x.size + y.size - 2 * common) / p


def sparsity_report(D):
    """Row/column popcounts plus the norms that certify sparsity."""
    row_sums = D.row_sums()
    col_sums = D.col_sums()
    cells = D.n_rows * D.n_cols
    return SparsityReport(
        row_sums=row_sums,
        col_sums=col_sums,
        linf_D=int(row_sums.max()) if row_sums.size else 0,
        linf_Dt=int(col_sums.max()) if col_sums.size else 0,
        density=(D.nnz / cells) if cells else 0.0,
    )


def save_matrix(path, matrix, magic=MATRIX_MAGIC):
    write_rowset_file(path, magic, matrix.rows(), matrix.n_cols)


def load_matrix(path, magic=MATRIX_MAGIC):
    rows, n_cols = read_rowset_file(path, magic)
    return SparseBinaryMatrix(rows, n_cols)
