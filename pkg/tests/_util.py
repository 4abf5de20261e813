"""Shared test helpers: synthetic data generators and independent oracles.

Everything here is deliberately written the slow, obvious way (dense
matrices, python loops, closed forms) so the tests check the library
against code that shares none of its implementation shortcuts.
"""

from math import comb

import numpy as np

from covclust.sparse import SparseBinaryMatrix


def dense_of(matrix):
    X = np.zeros((matrix.n_rows, matrix.n_cols), dtype=np.float64)
    for i in range(matrix.n_rows):
        X[i, matrix.row(i)] = 1.0
    return X


def matrix_from_dense(X):
    rows = [np.flatnonzero(X[i]).astype(np.int32) for i in range(X.shape[0])]
    return SparseBinaryMatrix(rows, X.shape[1])


def random_sparse(rng, n, p, density):
    X = rng.random((n, p)) < density
    return matrix_from_dense(X)


def planted_dataset(seed, n=2000, p=500, n_classes=10, class_size=50,
                    p_on=0.3, p_noise=0.005):
    """Disjoint planted category blocks with one user group per block."""
    assert n_classes * class_size <= p
    rng = np.random.default_rng(seed)
    blocks = [
        np.arange(g * class_size, (g + 1) * class_size) for g in range(n_classes)
    ]
    labels = np.repeat(np.arange(n_classes), n // n_classes)
    if labels.size < n:
        labels = np.concatenate([labels, rng.integers(0, n_classes, n - labels.size)])
    rows = []
    for i in range(n):
        probs = np.full(p, p_noise)
        probs[blocks[labels[i]]] = p_on
        rows.append(np.flatnonzero(rng.random(p) < probs).astype(np.int32))
    return SparseBinaryMatrix(rows, p), labels, blocks


def heavy_tail_dataset(seed, n=1200, p=372, n_classes=6, class_size=60,
                       n_global=12, p_noise=0.004):
    """Planted groups with power-law category popularity and user activity.

    Within each class, category activation decays as a power of its rank;
    a handful of globally popular categories and lognormal per-user activity
    produce the heavy margins that defeat raw-rows k-means.
    """
    assert n_classes * class_size + n_global <= p
    rng = np.random.default_rng(seed)
    blocks = [
        np.arange(g * class_size, (g + 1) * class_size) for g in range(n_classes)
    ]
    global_cats = np.arange(n_classes * class_size, n_classes * class_size + n_global)
    ranks = np.arange(1, class_size + 1, dtype=np.float64)
    block_probs = 0.85 * ranks ** -0.7
    global_probs = 0.8 * np.arange(1, n_global + 1, dtype=np.float64) ** -0.9
    labels = np.repeat(np.arange(n_classes), n // n_classes)
    activity = np.exp(rng.normal(0.0, 0.75, size=n))
    rows = []
    for i in range(n):
        probs = np.full(p, p_noise)
        probs[blocks[labels[i]]] = block_probs
        probs[global_cats] = global_probs
        probs = np.clip(probs * activity[i], 0.0, 0.95)
        rows.append(np.flatnonzero(rng.random(p) < probs).astype(np.int32))
    return SparseBinaryMatrix(rows, p), labels, blocks


def write_triplets(path, matrix, user_prefix="u", item_prefix="s"):
    """Persist a matrix as a count=1 triplet file, including zero rows."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# synthetic usage triplets\n")
        for i in range(matrix.n_rows):
            sup = matrix.row(i)
            if sup.size == 0:
                # keep the user in the catalog with an unset cell
                fh.write(f"{user_prefix}{i}\t{item_prefix}0\t0\n")
            for j in sup:
                fh.write(f"{user_prefix}{i}\t{item_prefix}{int(j)}\t1\n")


# ---------------------------------------------------------------------------
# independent metric implementations

def rand_index(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.size
    agree = 0
    for i in range(n):
        same_a = a[i + 1 :] == a[i]
        same_b = b[i + 1 :] == b[i]
        agree += int((same_a == same_b).sum())
    return agree / comb(n, 2)


def adjusted_rand_index(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    M = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(M, (ia, ib), 1)
    sum_cells = sum(comb(int(v), 2) for v in M.ravel())
    sum_rows = sum(comb(int(v), 2) for v in M.sum(axis=1))
    sum_cols = sum(comb(int(v), 2) for v in M.sum(axis=0))
    total = comb(a.size, 2)
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2
    if max_index == expected:
        return 1.0
    return (sum_cells - expected) / (max_index - expected)


def jaccard(a, b):
    sa, sb = set(map(int, a)), set(map(int, b))
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


def mean_pairwise_jaccard(sets):
    K = len(sets)
    total = 0.0
    for i in range(K):
        for j in range(i + 1, K):
            total += jaccard(sets[i], sets[j])
    return 2.0 * total / (K * (K - 1))


def match_classes_to_blocks(classes, blocks):
    """Greedy best-Jaccard matching; returns per-block best similarity."""
    scores = []
    remaining = list(range(len(classes)))
    for blk in blocks:
        best, best_c = -1.0, None
        for c in remaining:
            s = jaccard(classes[c], blk)
            if s > best:
                best, best_c = s, c
        scores.append(best)
        if best_c is not None:
            remaining.remove(best_c)
    return np.asarray(scores)


def instance_from_dense(Z, y, anchor_row=0):
    """Build a RegressionInstance directly from a dense 0/1 design."""
    from covclust.importance import RegressionInstance

    Z = np.asarray(Z, dtype=np.float64)
    n_obs, p = Z.shape
    supports = [np.flatnonzero(Z[:, k]).astype(np.int32) for k in range(p)]
    counts = np.asarray([s.size for s in supports], dtype=np.int64)
    indptr = np.zeros(p + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return RegressionInstance(
        anchor_row=anchor_row,
        n_obs=n_obs,
        n_features=p,
        responses=np.asarray(y, dtype=np.float64),
        col_indptr=indptr,
        col_rows=np.concatenate(supports) if p else np.empty(0, np.int32),
        col_flip=np.zeros(p, dtype=bool),
        col_nnz=counts,
    )


# ---------------------------------------------------------------------------
# brute-force oracles

def brute_kkt_violation(Z, y, beta, lam):
    """Stationarity residual from the dense objective, no shortcuts."""
    r = y - Z @ beta
    worst = 0.0
    for k in range(Z.shape[1]):
        g = 2.0 * float(Z[:, k] @ r)
        if abs(beta[k]) > 1e-10:
            worst = max(worst, abs(g - lam * np.sign(beta[k])))
        else:
            worst = max(worst, max(0.0, abs(g) - lam))
    return worst


def lasso_two_var_exact(Z, y, lam):
    """Exact 2-variable lasso by enumerating sign patterns.

    Solves min ||y - Zb||^2 + lam |b|_1 for p = 2 by checking the
    stationarity system under each sign pattern in {-,0,+}^2 and keeping
    the feasible solution with the lowest objective.
    """
    assert Z.shape[1] == 2
    G = Z.T @ Z
    c = Z.T @ y

    def objective(b):
        r = y - Z @ b
        return float(r @ r) + lam * float(np.abs(b).sum())

    best = None
    for s0 in (-1, 0, 1):
        for s1 in (-1, 0, 1):
            signs = np.array([s0, s1], dtype=float)
            active = np.flatnonzero(signs != 0)
            b = np.zeros(2)
            if active.size:
                A = G[np.ix_(active, active)]
                rhs = c[active] - 0.5 * lam * signs[active]
                try:
                    sol = np.linalg.solve(A, rhs)
                except np.linalg.LinAlgError:
                    continue
                b[active] = sol
                if np.any(np.sign(b[active]) != signs[active]):
                    continue
            # check the zero coordinates satisfy the subgradient condition
            g = 2.0 * (c - G @ b)
            ok = True
            for k in range(2):
                if signs[k] == 0 and abs(g[k]) > lam + 1e-9:
                    ok = False
            if not ok:
                continue
            val = objective(b)
            if best is None or val < best[0] - 1e-12:
                best = (val, b)
    assert best is not None
    return best[1]


def brute_class_objective(W_dense, subsets):
    stacked = np.concatenate([W_dense[sub] for sub in subsets], axis=0)
    grand = stacked.mean(axis=0)
    between = 0.0
    within = 0.0
    for sub in subsets:
        rows = W_dense[sub]
        mu = rows.mean(axis=0)
        between += float(((mu - grand) ** 2).sum())
        within += float(((rows - mu[None, :]) ** 2).sum())
    return between - within


def brute_recommend_scores(member_supports, member_features, anchor_pos):
    """Plain-python evaluation of the within-cluster scoring formulas.

    ``member_supports``: list of category sets, one per cluster member;
    ``member_features``: list of feature vectors (lists); ``anchor_pos``:
    index of the target user within the cluster. Returns {category: score}.
    """
    l = len(member_supports)
    dists = []
    for k in range(l):
        if k == anchor_pos:
            continue
        d = sum(
            (fa - fb) ** 2
            for fa, fb in zip(member_features[anchor_pos], member_features[k])
        ) ** 0.5
        dists.append((k, d))
    total = sum(d for _, d in dists)
    if total <= 0:
        sim = {k: 1.0 / len(dists) for k, _ in dists}
    else:
        raw = {k: (total - d) / total for k, d in dists}
        raw_total = sum(raw.values())
        if raw_total <= 0:
            sim = {k: 1.0 / len(dists) for k, _ in dists}
        else:
            sim = {k: v / raw_total for k, v in raw.items()}

    freq = {}
    for sup in member_supports:
        for j in sup:
            freq[j] = freq.get(j, 0) + 1
    fsum = sum(freq.values())
    prior = {j: f / fsum for j, f in freq.items()}

    scores = {}
    for j in prior:
        s = 0.0
        for k, w in sim.items():
            if j in member_supports[k]:
                s += w
        scores[j] = prior[j] * s
    return scores
