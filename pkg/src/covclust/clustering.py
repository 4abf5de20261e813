"""K-means over the feature matrix, cluster-count selection and the
cluster-quality metric suite (entropy change, impurity, similarity norms,
category co-occurrence), plus runtime assignment of new users.
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._binio import _check_magic, _read_exact
from ._lloyd import DenseDesign, lloyd
from .errors import ContractViolation, UndefinedImpurityError
from .transform import transform_single

MODEL_MAGIC = b"CVM1"
_U64 = struct.Struct("<Q")


@dataclass
class ClusterModel:
    L: int
    centroids: np.ndarray            # (L, K)
    assignments: np.ndarray          # (n,) int32
    inertia: float
    inertia_history: list = field(default_factory=list, repr=False)

    @property
    def n_rows(self):
        return int(self.assignments.shape[0])

    def cluster_sizes(self):
        return np.bincount(self.assignments, minlength=self.L)

    def members(self, j):
        return np.flatnonzero(self.assignments == j)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(_U64.pack(self.L))
            fh.write(_U64.pack(self.centroids.shape[1]))
            fh.write(_U64.pack(self.assignments.shape[0]))
            fh.write(self.centroids.astype("<f8").tobytes())
            fh.write(self.assignments.astype("<u4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            _check_magic(fh, MODEL_MAGIC, path)
            L = _U64.unpack(_read_exact(fh, 8, path))[0]
            K = _U64.unpack(_read_exact(fh, 8, path))[0]
            n = _U64.unpack(_read_exact(fh, 8, path))[0]
            cen = np.frombuffer(_read_exact(fh, 8 * L * K, path), dtype="<f8")
            asg = np.frombuffer(_read_exact(fh, 4 * n, path), dtype="<u4")
        centroids = cen.reshape(L, K).copy()
        assignments = asg.astype(np.int32)
        model = cls(L=int(L), centroids=centroids, assignments=assignments, inertia=0.0)
        return model


@dataclass
class ClusterQuality:
    entropy_change: float
    impurity: float
    similarity_linf: float
    cooccurrence: np.ndarray          # p(f) for f = 1..L
    cluster_sizes: np.ndarray
    cluster_item_sets: list           # categories present in each cluster

    def cumulative_cooccurrence(self):
        """Fraction of present categories appearing in <= f clusters."""
        total = self.cooccurrence.sum()
        return np.cumsum(self.cooccurrence) / total if total else np.zeros(0)


def kmeans_fit(F, L, seed, restarts=4, max_iter=300, tol=1e-9):
    """Lloyd's k-means on the feature rows, best of ``restarts`` by inertia.

    k-means++ seeding; empty clusters are repaired by splitting the cluster
    contributing the most inertia. Deterministic given the seed.
    """
    if not 1 <= L <= F.n_rows:
        raise ContractViolation(f"L must be in [1, {F.n_rows}], got {L}")
    design = DenseDesign(F.values)
    centroids, labels, inertia, history = lloyd(
        design, L, seed=seed, restarts=restarts, max_iter=max_iter, tol=tol,
        empty_rule="split_max_inertia",
    )
    return ClusterModel(
        L=L,
        centroids=centroids,
        assignments=labels,
        inertia=inertia,
        inertia_history=history,
    )


def cluster_entropy_change(model, n=None):
    """sum(q ln q) + ln L over cluster occupancy proportions q."""
    sizes = model.cluster_sizes().astype(np.float64)
    if n is None:
        n = sizes.sum()
    q = sizes / n
    nz = q > 0
    return float((q[nz] * np.log(q[nz])).sum() + np.log(model.L))


def cluster_item_sets(model, D):
    """Per-cluster union of member rows' categories."""
    sets = []
    for j in range(model.L):
        members = model.members(j)
        if members.size:
            parts = [D.row(int(i)) for i in members]
            sets.append(np.unique(np.concatenate(parts)) if parts else np.empty(0, np.int32))
        else:
            sets.append(np.empty(0, dtype=np.int32))
    return sets


def _jaccard_matrix(item_sets, p):
    L = len(item_sets)
    member = np.zeros((L, p), dtype=np.int64)
    for j, s in enumerate(item_sets):
        member[j, s] = 1
    sizes = member.sum(axis=1)
    inter = member @ member.T
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        S = np.where(union > 0, inter / union, 0.0)
    np.fill_diagonal(S, 0.0)
    return S


def cluster_impurity(model, D, item_sets=None):
    """Mean pairwise Jaccard similarity of the cluster item sets."""
    if model.L < 2:
        raise UndefinedImpurityError("impurity needs at least two clusters")
    if item_sets is None:
        item_sets = cluster_item_sets(model, D)
    S = _jaccard_matrix(item_sets, D.n_cols)
    iu = np.triu_indices(model.L, k=1)
    return float(S[iu].sum() * 2.0 / (model.L * (model.L - 1)))


def similarity_stats(model, D, item_sets=None):
    """Zero-diagonal Jaccard similarity matrix and its max row average."""
    if model.L < 2:
        raise UndefinedImpurityError("similarity stats need at least two clusters")
    if item_sets is None:
        item_sets = cluster_item_sets(model, D)
    S = _jaccard_matrix(item_sets, D.n_cols)
    linf = float((S.sum(axis=1) / (model.L - 1)).max())
    return S, linf


def cooccurrence_histogram(model, D, item_sets=None):
    """p(f): number of categories present in exactly f clusters, f=1..L."""
    if item_sets is None:
        item_sets = cluster_item_sets(model, D)
    occur = np.zeros(D.n_cols, dtype=np.int64)
    for s in item_sets:
        occur[s] += 1
    counts = np.bincount(occur[occur > 0], minlength=model.L + 1)[1 : model.L + 1]
    return counts


def compute_quality(model, D):
    """Bundle every cluster-quality metric into one record."""
    item_sets = cluster_item_sets(model, D)
    S, linf = similarity_stats(model, D, item_sets)
    return ClusterQuality(
        entropy_change=cluster_entropy_change(model),
        impurity=cluster_impurity(model, D, item_sets),
        similarity_linf=linf,
        cooccurrence=cooccurrence_histogram(model, D, item_sets),
        cluster_sizes=model.cluster_sizes(),
        cluster_item_sets=item_sets,
    )


def select_cluster_count(F, D, l_grid, seed, restarts=4, max_iter=300, tol=1e-9):
    """Pick the cluster count where impurity and entropy change cross.

    Fits at every grid value, then looks for a sign change of
    impurity - entropy_change between consecutive grid points and returns
    the bracket endpoint with the smaller absolute gap. Without a sign
    change the closest-gap point is returned under a warning.

    Returns (L_star, diagnostics).
    """
    l_grid = [int(v) for v in l_grid]
    if not l_grid:
        raise ContractViolation("l_grid must be non-empty")
    if sorted(l_grid) != l_grid or l_grid[0] < 2:
        raise ContractViolation("l_grid must be ascending with values >= 2")

    diagnostics = []
    gaps = []
    for L in l_grid:
        model = kmeans_fit(F, L, seed=seed, restarts=restarts,
                           max_iter=max_iter, tol=tol)
        item_sets = cluster_item_sets(model, D)
        m_l = cluster_entropy_change(model)
        i_l = cluster_impurity(model, D, item_sets)
        _, linf = similarity_stats(model, D, item_sets)
        diagnostics.append(
            {
                "L": L,
                "impurity": i_l,
                "entropy_change": m_l,
                "similarity_linf": linf,
            }
        )
        gaps.append(i_l - m_l)

    gaps = np.asarray(gaps)
    candidates = set(np.flatnonzero(gaps == 0.0).tolist())
    for t in range(len(gaps) - 1):
        if gaps[t] * gaps[t + 1] < 0:
            candidates.update((t, t + 1))
    if not candidates:
        warnings.warn(
            "impurity and entropy-change curves do not intersect on the "
            "grid; returning the closest-gap point",
            stacklevel=2,
        )
        candidates = set(range(len(gaps)))
    order = sorted(candidates)
    best = min(order, key=lambda t: (abs(gaps[t]), t))
    return l_grid[best], diagnostics


def assign_user(model, cs, user_support):
    """Map a new user's category set to its nearest cluster."""
    phi = transform_single(user_support, cs)
    d2 = ((model.centroids - phi[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(d2))
