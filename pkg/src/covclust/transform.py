"""Class-loading feature transform.

Every binary usage row maps to a K-vector of class loadings: the fraction
of each class's categories the row has set. Zero rows map to the zero
vector; categories outside every class contribute nothing.
"""

from dataclasses import dataclass

import numpy as np

from ._binio import read_f64_matrix, write_f64_matrix
from .errors import ContractViolation

FEATURES_MAGIC = b"CVF1"


@dataclass
class FeatureMatrix:
    n_rows: int
    K: int
    values: np.ndarray   # dense (n_rows, K), entries in [0, 1]

    def save(self, path):
        write_f64_matrix(path, FEATURES_MAGIC, self.values)

    @classmethod
    def load(cls, path):
        values = read_f64_matrix(path, FEATURES_MAGIC)
        return cls(n_rows=values.shape[0], K=values.shape[1], values=values)

    def save_csv(self, path):
        header = ",".join(f"class_{u}" for u in range(self.K))
        np.savetxt(path, self.values, delimiter=",", header=header, comments="")


def _class_membership(cs):
    member = np.zeros((cs.K, cs.p), dtype=np.float64)
    for u, c in enumerate(cs.classes):
        member[u, c] = 1.0
    sizes = np.asarray([len(c) for c in cs.classes], dtype=np.float64)
    return member, sizes


def transform(D, cs):
    """Project every matrix row into the class-loading space."""
    if D.n_cols != cs.p:
        raise ContractViolation(
            f"matrix has {D.n_cols} columns but classes were built for {cs.p}"
        )
    member, sizes = _class_membership(cs)
    values = np.empty((D.n_rows, cs.K), dtype=np.float64)
    for i in range(D.n_rows):
        sup = D.row(i)
        values[i] = member[:, sup].sum(axis=1) if sup.size else 0.0
    values /= sizes[None, :]
    return FeatureMatrix(n_rows=D.n_rows, K=cs.K, values=values)


def transform_single(user_support, cs):
    """Feature vector for one user given as a set of category indices."""
    sup = np.asarray(sorted(set(int(j) for j in user_support)), dtype=np.int64)
    if sup.size and (sup[0] < 0 or sup[-1] >= cs.p):
        raise ContractViolation(f"category index out of range [0, {cs.p})")
    member, sizes = _class_membership(cs)
    loading = member[:, sup].sum(axis=1) if sup.size else np.zeros(cs.K)
    return loading / sizes
