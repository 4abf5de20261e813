"""Low-level binary readers/writers for the persisted artifact formats.

All integers are little-endian. Row-set files carry a 4-byte magic, a
(n_rows, n_cols, nnz) u64 header, then one length-prefixed u32 index list
per row. Dense float files carry a magic, a u64 shape header and row-major
IEEE-754 f64 payload.
"""

import struct

import numpy as np

from .errors import ParseError

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def _check_magic(fh, magic, path):
    got = fh.read(4)
    if got != magic:
        raise ParseError(f"{path}: bad magic {got!r}, expected {magic!r}")


def write_rowset_file(path, magic, rows, n_cols):
    """Write sorted u32 index lists under the given 4-byte magic."""
    assert len(magic) == 4
    nnz = sum(len(r) for r in rows)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_U64.pack(len(rows)))
        fh.write(_U64.pack(n_cols))
        fh.write(_U64.pack(nnz))
        for r in rows:
            fh.write(_U32.pack(len(r)))
            fh.write(np.asarray(r, dtype="<u4").tobytes())


def read_rowset_file(path, magic):
    """Read a row-set file; returns (rows, n_cols) with int32 index arrays."""
    with open(path, "rb") as fh:
        _check_magic(fh, magic, path)
        n_rows = _U64.unpack(_read_exact(fh, 8, path))[0]
        n_cols = _U64.unpack(_read_exact(fh, 8, path))[0]
        nnz = _U64.unpack(_read_exact(fh, 8, path))[0]
        rows = []
        total = 0
        for _ in range(n_rows):
            k = _U32.unpack(_read_exact(fh, 4, path))[0]
            idx = np.frombuffer(_read_exact(fh, 4 * k, path), dtype="<u4")
            rows.append(idx.astype(np.int32))
            total += k
    if total != nnz:
        raise ParseError(f"{path}: header nnz {nnz} != stored {total}")
    return rows, int(n_cols)


def write_f64_matrix(path, magic, values):
    values = np.ascontiguousarray(values, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_U64.pack(values.shape[0]))
        fh.write(_U64.pack(values.shape[1]))
        fh.write(values.astype("<f8").tobytes())


def read_f64_matrix(path, magic):
    with open(path, "rb") as fh:
        _check_magic(fh, magic, path)
        n = _U64.unpack(_read_exact(fh, 8, path))[0]
        k = _U64.unpack(_read_exact(fh, 8, path))[0]
        buf = _read_exact(fh, 8 * n * k, path)
    return np.frombuffer(buf, dtype="<f8").reshape(n, k).copy()
