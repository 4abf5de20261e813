"""Covariate class discovery.

Rows of the importance matrix with similar supports are grouped, each
group's frequently-flagged categories become a class, and the class count
is chosen by scanning an ascending grid and taking the first count whose
classes are both pure enough (low pairwise Jaccard) and uniform enough in
size (low entropy difference). Among restarted candidate partitions at the
chosen count, the one maximizing between-minus-within support variation
wins.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from ._lloyd import BinaryRowsDesign, lloyd
from .errors import (
    ContractViolation,
    EmptyClassSetError,
    InfeasibleSelectionError,
    UndefinedImpurityError,
)
from .sparse import SparseBinaryMatrix


@dataclass
class ClassSet:
    """K groups of category indices plus their supporting observation rows.

    ``support_subsets[u]`` are the importance-matrix rows whose support
    contains every category of class u; when no row qualifies, the group of
    rows that generated the class is used instead.
    """

    classes: list
    K: int
    p: int
    coverage: float
    support_subsets: list

    def sizes(self):
        return np.asarray([len(c) for c in self.classes], dtype=np.int64)

    def to_json(self, path, quality=None, diagnostics=None):
        payload = {
            "p": self.p,
            "K": self.K,
            "coverage": self.coverage,
            "classes": [[int(j) for j in c] for c in self.classes],
            "support_subsets": [[int(i) for i in s] for s in self.support_subsets],
        }
        if quality is not None:
            payload["quality"] = {
                "entropy_difference": quality.entropy_difference,
                "impurity": quality.impurity,
                "objective": quality.objective,
            }
        if diagnostics is not None:
            payload["diagnostics"] = diagnostics
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(
            classes=[np.asarray(c, dtype=np.int32) for c in d["classes"]],
            K=d["K"],
            p=d["p"],
            coverage=d["coverage"],
            support_subsets=[np.asarray(s, dtype=np.int64) for s in d["support_subsets"]],
        )


@dataclass
class ClassQuality:
    entropy_difference: float    # 0 iff all classes have equal size
    impurity: float              # mean pairwise Jaccard, 0 iff disjoint
    objective: float             # between-class minus within-class variation


def group_importance_rows(W, K, seed, restarts=8, max_iter=300, tol=1e-9):
    """Partition importance rows into K groups by k-means on 0/1 supports.

    Best of ``restarts`` seeded initializations by within-group sum of
    squares. If fewer than K distinct rows exist, a warning is raised and
    the achievable number of groups is used.
    """
    if K < 1 or K > W.m:
        raise ContractViolation(f"K must be in [1, {W.m}], got {K}")
    distinct = len({tuple(np.asarray(r).tolist()) for r in W.w_rows})
    if K > distinct:
        warnings.warn(
            f"requested K={K} exceeds {distinct} distinct importance rows; "
            f"grouping into {distinct} groups instead",
            stacklevel=2,
        )
        K = distinct
    design = BinaryRowsDesign(SparseBinaryMatrix(W.w_rows, W.p))
    _, labels, _, _ = lloyd(
        design, K, seed=seed, restarts=restarts, max_iter=max_iter, tol=tol,
        empty_rule="farthest_point",
    )
    return labels


def derive_classes(partition, W, tau=0.5):
    """Turn a row partition into classes by per-group frequency voting.

    A category joins group u's class when at least a ``tau`` fraction of the
    group's rows flag it. Empty classes are dropped (K decremented).
    """
    if not 0 < tau <= 1:
        raise ContractViolation(f"tau must be in (0, 1], got {tau}")
    partition = np.asarray(partition)
    if partition.shape[0] != W.m:
        raise ContractViolation("partition must cover every importance row")

    classes = []
    generating_groups = []
    for u in np.unique(partition):
        members = np.flatnonzero(partition == u)
        counts = np.zeros(W.p, dtype=np.int64)
        for i in members:
            counts[W.w_rows[i]] += 1
        cls = np.flatnonzero(counts / members.size >= tau).astype(np.int32)
        if cls.size:
            classes.append(cls)
            generating_groups.append(members)
    if not classes:
        raise EmptyClassSetError(
            f"tau={tau} left every class empty; lower tau or check the fits"
        )

    support_subsets = []
    for cls, group in zip(classes, generating_groups):
        mask = np.zeros(W.p, dtype=bool)
        mask[cls] = True
        rows = [
            i for i in range(W.m) if mask[W.w_rows[i]].sum() == cls.size
        ]
        support_subsets.append(
            np.asarray(rows, dtype=np.int64) if rows else group.astype(np.int64)
        )

    covered = np.unique(np.concatenate(classes)) if classes else np.empty(0)
    return ClassSet(
        classes=classes,
        K=len(classes),
        p=W.p,
        coverage=covered.size / W.p,
        support_subsets=support_subsets,
    )


def class_entropy_difference(cs, p=None):
    """Entropy gap to the uniform size distribution: sum(pi ln pi) + ln K.

    Sizes are normalized by the total over classes so the proportions sum
    to one and the gap is non-negative, zero exactly at equal sizes.
    """
    sizes = cs.sizes().astype(np.float64)
    pi = sizes / sizes.sum()
    return float((pi * np.log(pi)).sum() + np.log(len(sizes)))


def class_impurity(cs):
    """Mean pairwise Jaccard similarity between the class category sets."""
    if cs.K < 2:
        raise UndefinedImpurityError("impurity needs at least two classes")
    return _mean_pairwise_jaccard(cs.classes, cs.p)


def _mean_pairwise_jaccard(sets, p):
    K = len(sets)
    member = np.zeros((K, p), dtype=np.int64)
    for u, s in enumerate(sets):
        member[u, s] = 1
    sizes = member.sum(axis=1)
    inter = member @ member.T
    union = sizes[:, None] + sizes[None, :] - inter
    iu = np.triu_indices(K, k=1)
    with np.errstate(invalid="ignore"):
        jac = np.where(union[iu] > 0, inter[iu] / union[iu], 0.0)
    return float(jac.sum() * 2.0 / (K * (K - 1)))


def class_objective(cs, W):
    """Between-class minus within-class variation of the support rows.

    Each class contributes its support-subset mean's squared distance to the
    grand mean (rows counted with multiplicity across subsets), minus the
    subset's internal scatter.
    """
    for u, sub in enumerate(cs.support_subsets):
        if len(sub) == 0:
            raise ContractViolation(f"support subset {u} is empty")

    p = W.p
    grand = np.zeros(p, dtype=np.float64)
    total_rows = 0
    subset_means = []
    for sub in cs.support_subsets:
        acc = np.zeros(p, dtype=np.float64)
        for i in sub:
            acc[W.w_rows[i]] += 1.0
        grand += acc
        total_rows += len(sub)
        subset_means.append(acc / len(sub))
    grand /= total_rows

    between = 0.0
    within = 0.0
    for mean_u, sub in zip(subset_means, cs.support_subsets):
        diff = mean_u - grand
        between += float(diff @ diff)
        mean_sq = float(mean_u @ mean_u)
        for i in sub:
            sup = W.w_rows[i]
            within += len(sup) - 2.0 * float(mean_u[sup].sum()) + mean_sq
    return between - within


def _subseed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def select_classes(
    W,
    p,
    k_grid,
    eps1,
    eps2,
    tau=0.5,
    seed=0,
    restarts=8,
    max_iter=300,
):
    """Scan an ascending class-count grid and pick the first feasible count.

    A candidate partition is feasible only when every one of its K classes
    survives derivation (a count whose partitions collapse cannot represent
    K classes) and its impurity and entropy difference fall under the two
    bounds. At each count, ``restarts`` candidate partitions are derived and
    the one maximizing the between-minus-within objective represents the
    count. The full per-count diagnostic table is always built, for
    plotting and for the error path.

    Returns (ClassSet, ClassQuality, diagnostics).
    """
    k_grid = [int(k) for k in k_grid]
    if not k_grid or sorted(k_grid) != k_grid:
        raise ContractViolation("k_grid must be a non-empty ascending list")
    if k_grid[0] < 2 or k_grid[-1] > W.m:
        raise ContractViolation(f"k_grid values must lie in [2, {W.m}]")
    if eps1 <= 0 or eps2 <= 0:
        raise ContractViolation("eps bounds must be positive")

    diagnostics = []
    chosen = None
    for K in k_grid:
        best = None
        n_valid = 0
        for r in range(restarts):
            labels = group_importance_rows(
                W, K, seed=_subseed(seed, K, r), restarts=1, max_iter=max_iter
            )
            try:
                cand = derive_classes(labels, W, tau=tau)
            except EmptyClassSetError:
                continue
            if cand.K != K:
                continue
            n_valid += 1
            obj = class_objective(cand, W)
            if best is None or obj > best[1]:
                best = (cand, obj)
        row = {
            "K": K,
            "achieved_K": None,
            "impurity": None,
            "entropy_difference": None,
            "objective": None,
            "valid_candidates": n_valid,
            "feasible": False,
        }
        if best is not None:
            cand, obj = best
            impurity = class_impurity(cand)
            entropy = class_entropy_difference(cand, p)
            feasible = impurity < eps1 and entropy < eps2
            row.update(
                achieved_K=cand.K,
                impurity=impurity,
                entropy_difference=entropy,
                objective=obj,
                feasible=feasible,
            )
            if feasible and chosen is None:
                chosen = (cand, ClassQuality(entropy, impurity, obj))
        diagnostics.append(row)

    if chosen is None:
        raise InfeasibleSelectionError(
            f"no K in {k_grid[0]}..{k_grid[-1]} satisfied impurity<{eps1} "
            f"and entropy<{eps2}",
            diagnostics,
        )
    cs, quality = chosen
    if cs.coverage < 0.5:
        warnings.warn(
            f"classes cover only {cs.coverage:.1%} of categories; "
            "the transform will ignore the rest",
            stacklevel=2,
        )
    return cs, quality, diagnostics
