"""Shared k-means machinery (Lloyd iterations, k-means++ seeding).

Two data backends feed the same loop: a dense float design and a
sparse-binary design that never densifies its rows. Both are deterministic
given the seed. Empty clusters are repaired in one of two ways: re-seeding
from the globally farthest row, or splitting the cluster that contributes
the most inertia.
"""

import numpy as np

from .errors import ContractViolation


def _segment_sums(values, indptr):
    cs = np.concatenate(([0], np.cumsum(values)))
    return cs[indptr[1:]] - cs[indptr[:-1]]


class DenseDesign:
    def __init__(self, X):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.n, self.dim = self.X.shape
        self._sq = np.einsum("ij,ij->i", self.X, self.X)

    def point(self, i):
        return self.X[i].copy()

    def dist2_matrix(self, C):
        d2 = self._sq[:, None] + np.einsum("ij,ij->i", C, C)[None, :] - 2.0 * (self.X @ C.T)
        np.maximum(d2, 0.0, out=d2)
        return d2

    def mean_rows(self, idx):
        return self.X[idx].mean(axis=0)


class BinaryRowsDesign:
    """Rows of a SparseBinaryMatrix treated as dense 0/1 vectors."""

    def __init__(self, matrix):
        self._indptr, self._indices = matrix.row_major_arrays()
        self.n = matrix.n_rows
        self.dim = matrix.n_cols
        self._sq = np.diff(self._indptr).astype(np.float64)

    def point(self, i):
        v = np.zeros(self.dim, dtype=np.float64)
        v[self._indices[self._indptr[i] : self._indptr[i + 1]]] = 1.0
        return v

    def dist2_matrix(self, C):
        d2 = np.empty((self.n, C.shape[0]), dtype=np.float64)
        for j in range(C.shape[0]):
            c = C[j]
            dots = _segment_sums(c[self._indices], self._indptr)
            d2[:, j] = self._sq - 2.0 * dots + float(c @ c)
        np.maximum(d2, 0.0, out=d2)
        return d2

    def mean_rows(self, idx):
        acc = np.zeros(self.dim, dtype=np.float64)
        for i in idx:
            sl = self._indices[self._indptr[i] : self._indptr[i + 1]]
            acc[sl] += 1.0
        return acc / len(idx)


def _kmeanspp(design, k, rng):
    C = np.empty((k, design.dim), dtype=np.float64)
    first = int(rng.integers(design.n))
    C[0] = design.point(first)
    d2 = design.dist2_matrix(C[0:1])[:, 0]
    for t in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(design.n, p=d2 / total))
        else:
            idx = int(rng.integers(design.n))
        C[t] = design.point(idx)
        np.minimum(d2, design.dist2_matrix(C[t : t + 1])[:, 0], out=d2)
    return C


def _repair_empties(design, C, labels, dmin, k, rule):
    """Re-seed empty clusters in place; returns True if anything moved."""
    sizes = np.bincount(labels, minlength=k)
    empties = np.flatnonzero(sizes == 0)
    if empties.size == 0:
        return False
    moved = np.zeros(design.n, dtype=bool)
    for j in empties:
        if rule == "split_max_inertia":
            totals = np.bincount(labels, weights=dmin, minlength=k)
            donor_cluster = int(np.argmax(totals))
            members = np.flatnonzero((labels == donor_cluster) & ~moved)
            if members.size == 0:
                members = np.flatnonzero(~moved)
        else:  # farthest_point
            members = np.flatnonzero(~moved & (sizes[labels] > 1))
            if members.size == 0:
                members = np.flatnonzero(~moved)
            if members.size == 0:
                continue
        pick = int(members[np.argmax(dmin[members])])
        sizes[labels[pick]] -= 1
        sizes[j] += 1
        C[j] = design.point(pick)
        labels[pick] = j
        dmin[pick] = 0.0
        moved[pick] = True
    return True


def _assign(design, C):
    d2 = design.dist2_matrix(C)
    labels = np.argmin(d2, axis=1).astype(np.int32)
    return labels, d2[np.arange(design.n), labels]


def lloyd(design, k, seed, restarts=1, max_iter=300, tol=1e-7, empty_rule="split_max_inertia"):
    """Best-of-restarts Lloyd's algorithm.

    Returns (centroids, labels, inertia, history) where history is the
    per-iteration assignment objective of the winning restart.
    """
    if not 1 <= k <= design.n:
        raise ContractViolation(f"k must be in [1, {design.n}], got {k}")
    if restarts < 1:
        raise ContractViolation("restarts must be >= 1")
    if empty_rule not in ("split_max_inertia", "farthest_point"):
        raise ContractViolation(f"unknown empty_rule {empty_rule!r}")

    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        C = _kmeanspp(design, k, rng)
        history = []
        for _ in range(max_iter):
            labels, dmin = _assign(design, C)
            repaired = _repair_empties(design, C, labels, dmin, k, empty_rule)
            history.append(float(dmin.sum()))
            newC = np.empty_like(C)
            for j in range(k):
                idx = np.flatnonzero(labels == j)
                newC[j] = design.mean_rows(idx) if idx.size else C[j]
            shift = float(np.sqrt(((newC - C) ** 2).sum(axis=1)).max())
            C = newC
            if shift <= tol and not repaired:
                break
        # final sync so labels are optimal for the returned centroids
        labels, dmin = _assign(design, C)
        guard = 0
        while np.bincount(labels, minlength=k).min() == 0 and guard < 8:
            _repair_empties(design, C, labels, dmin, k, empty_rule)
            guard += 1
        inertia = float(dmin.sum())
        if best is None or inertia < best[2]:
            best = (C, labels, inertia, history)
    return best
