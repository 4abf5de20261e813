"""Training-row sampler.

Draws an m-row training matrix whose row/column averages track the full
matrix: rows are stratified into popcount-quantile bins and drawn
proportionally, then the draw is accepted only if the column averages of the
sample correlate strongly enough with those of the full matrix.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InsufficientDataError, SamplingFailureError


@dataclass
class SamplePlan:
    m: int
    seed: int
    row_ids: np.ndarray = field(repr=False)
    col_avg_correlation: float
    row_avg_ratio: float
    attempts_used: int = 1

    def to_json(self, path):
        payload = {
            "m": self.m,
            "seed": self.seed,
            "row_ids": [int(i) for i in self.row_ids],
            "col_avg_correlation": self.col_avg_correlation,
            "row_avg_ratio": self.row_avg_ratio,
            "attempts_used": self.attempts_used,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(
            m=d["m"],
            seed=d["seed"],
            row_ids=np.asarray(d["row_ids"], dtype=np.int64),
            col_avg_correlation=d["col_avg_correlation"],
            row_avg_ratio=d["row_avg_ratio"],
            attempts_used=d.get("attempts_used", 1),
        )


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        # constant vector(s): perfectly aligned only if both are constant
        return 1.0 if (da == 0).all() and (db == 0).all() else 0.0
    return float((da * db).sum() / denom)


def _allocate(bin_sizes, m):
    """Largest-remainder proportional allocation of m draws across bins."""
    sizes = np.asarray(bin_sizes, dtype=np.int64)
    total = sizes.sum()
    raw = sizes * m / total
    alloc = np.floor(raw).astype(np.int64)
    remainder = m - alloc.sum()
    if remainder > 0:
        order = np.argsort(-(raw - alloc), kind="stable")
        alloc[order[:remainder]] += 1
    # never ask a bin for more rows than it has; push overflow elsewhere
    overflow = np.maximum(alloc - sizes, 0).sum()
    alloc = np.minimum(alloc, sizes)
    while overflow > 0:
        room = sizes - alloc
        k = int(np.argmax(room))
        if room[k] <= 0:
            break
        take = min(overflow, room[k])
        alloc[k] += take
        overflow -= take
    return alloc


def sample_training_rows(
    D, m, seed, min_corr=0.9, max_attempts=20, n_bins=10
):
    """Select m training rows from D, preserving its sparse structure.

    Zero-popcount rows are excluded from the pool (their distance regressions
    are degenerate). The draw is deterministic given (D, m, seed): rejected
    attempts re-draw with an incremented sub-seed.
    """
    if m < 1:
        raise ContractViolation(f"m must be >= 1, got {m}")
    if not min_corr < 1:
        raise ContractViolation(f"min_corr must be < 1, got {min_corr}")
    if max_attempts < 1:
        raise ContractViolation("max_attempts must be >= 1")

    row_sums = D.row_sums()
    pool = np.flatnonzero(row_sums > 0)
    if pool.size < m:
        raise InsufficientDataError(
            f"requested m={m} but only {pool.size} rows have nonzero popcount"
        )

    full_col_avg = D.col_sums() / D.n_rows
    full_row_mean = row_sums.mean()

    pool_counts = row_sums[pool]
    edges = np.quantile(pool_counts, np.linspace(0.0, 1.0, n_bins + 1))
    edges = np.unique(edges)
    if edges.size > 1:
        bin_of = np.clip(np.searchsorted(edges, pool_counts, side="right") - 1, 0, edges.size - 2)
    else:
        bin_of = np.zeros(pool.size, dtype=np.int64)
    bins = [pool[bin_of == b] for b in range(bin_of.max() + 1)]
    bins = [b for b in bins if b.size]
    alloc = _allocate([b.size for b in bins], m)

    best_corr = -2.0
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        chosen = [
            rng.choice(b, size=int(k), replace=False)
            for b, k in zip(bins, alloc)
            if k > 0
        ]
        row_ids = np.sort(np.concatenate(chosen)).astype(np.int64)

        sub = np.zeros(D.n_cols, dtype=np.int64)
        for i in row_ids:
            np.add.at(sub, D.row(int(i)), 1)
        corr = _pearson(sub / m, full_col_avg)
        ratio = float(row_sums[row_ids].mean() / full_row_mean)
        best_corr = max(best_corr, corr)
        if corr >= min_corr and 0.8 <= ratio <= 1.25:
            return SamplePlan(
                m=m,
                seed=seed,
                row_ids=row_ids,
                col_avg_correlation=corr,
                row_avg_ratio=ratio,
                attempts_used=attempt + 1,
            )
    raise SamplingFailureError(
        f"no draw met min_corr={min_corr} within {max_attempts} attempts "
        f"(best correlation {best_corr:.4f})",
        best_correlation=best_corr,
    )
