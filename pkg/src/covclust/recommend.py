"""Within-cluster recommendation scoring.

A user's cluster peers are weighted by feature-space closeness, every
category present in the cluster gets a frequency prior, and a category's
score is its prior times the total weight of the peers using it.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NoPeersError


@dataclass
class SimilarityVector:
    anchor: int
    peer_ids: np.ndarray     # cluster members, anchor excluded
    values: np.ndarray       # non-negative, sums to 1


@dataclass
class CategoryPrior:
    categories: np.ndarray   # category indices present in the cluster
    probs: np.ndarray        # frequencies scaled to sum to 1


@dataclass
class ScoredCategory:
    category: int
    score: float
    used: bool


@dataclass
class RecommendationList:
    anchor: int
    cluster: int
    items: list              # ScoredCategory, sorted by descending score


def similarity_vector(F, model, i):
    """Distance-derived peer weights for user i within its cluster.

    Each peer's raw weight is its share of the total distance deficit,
    (sum_d - d_ij) / sum_d; the vector is then rescaled to sum to one.
    Degenerate cases (single peer, all-zero distances) fall back to the
    uniform vector.
    """
    if not 0 <= i < F.n_rows:
        raise ContractViolation(f"user index {i} out of range [0, {F.n_rows})")
    cluster = int(model.assignments[i])
    members = model.members(cluster)
    peers = members[members != i]
    if peers.size == 0:
        raise NoPeersError(f"user {i} is alone in cluster {cluster}")

    diff = F.values[peers] - F.values[i][None, :]
    dist = np.sqrt((diff * diff).sum(axis=1))
    total = dist.sum()
    if total <= 0.0:
        values = np.full(peers.size, 1.0 / peers.size)
    else:
        raw = (total - dist) / total
        raw_total = raw.sum()
        if raw_total <= 0.0:
            values = np.full(peers.size, 1.0 / peers.size)
        else:
            values = raw / raw_total
    return SimilarityVector(anchor=i, peer_ids=peers, values=values)


def category_prior(D, model, cluster):
    """In-cluster category frequencies scaled to a probability vector."""
    members = model.members(int(cluster))
    if members.size == 0:
        raise ContractViolation(f"cluster {cluster} has no members")
    counts = np.zeros(D.n_cols, dtype=np.int64)
    for i in members:
        counts[D.row(int(i))] += 1
    categories = np.flatnonzero(counts).astype(np.int32)
    freq = counts[categories].astype(np.float64)
    return CategoryPrior(categories=categories, probs=freq / freq.sum())


def score_categories(D, F, model, i):
    """Score every cluster category for user i: prior times peer weight."""
    sim = similarity_vector(F, model, i)
    cluster = int(model.assignments[i])
    prior = category_prior(D, model, cluster)

    cat_pos = np.full(D.n_cols, -1, dtype=np.int64)
    cat_pos[prior.categories] = np.arange(prior.categories.size)

    weight = np.zeros(prior.categories.size, dtype=np.float64)
    for s, k in zip(sim.values, sim.peer_ids):
        weight[cat_pos[D.row(int(k))]] += s
    scores = prior.probs * weight

    used = np.zeros(prior.categories.size, dtype=bool)
    used[cat_pos[D.row(i)]] = True

    order = np.lexsort((prior.categories, -scores))
    items = [
        ScoredCategory(
            category=int(prior.categories[t]),
            score=float(scores[t]),
            used=bool(used[t]),
        )
        for t in order
    ]
    return RecommendationList(anchor=i, cluster=cluster, items=items)


def recommend(D, F, model, i, top_k, exclude_used=False, catalog=None):
    """Top-k scored categories for user i, optionally dropping known ones.

    Returns (items, truncated): ``items`` are ScoredCategory entries, with
    ``category`` mapped through the catalog when one is given; ``truncated``
    flags that fewer than top_k candidates were available.
    """
    if top_k < 1:
        raise ContractViolation(f"top_k must be >= 1, got {top_k}")
    ranked = score_categories(D, F, model, i)
    pool = [it for it in ranked.items if not (exclude_used and it.used)]
    truncated = len(pool) < top_k
    out = pool[:top_k]
    if catalog is not None:
        out = [
            ScoredCategory(
                category=catalog.id_of(it.category), score=it.score, used=it.used
            )
            for it in out
        ]
    return out, truncated
