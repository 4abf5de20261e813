"""Per-row importance estimation.

For every training row, pairwise distances to the remaining rows are
regressed on the coordinate-wise dissimilarity indicators under an L1
penalty; the surviving coefficients flag the categories that drive that
row's separation from the rest. Stacking the per-row support indicators
gives the binary importance matrix.

The design matrix is never materialized: its column k is the matrix column
k XOR the anchor's bit k, so everything is derived from column supports plus
a flip flag. The solver is cyclic coordinate descent with covariance
updates (cached inner products between design columns), with the standard
active-set acceleration: cycle the active coordinates to stationarity, then
rescan all coordinates and absorb any violators.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._binio import read_rowset_file, write_rowset_file
from .errors import (
    ContractViolation,
    ConvergenceError,
    DegenerateInstanceError,
    ImportanceFailureError,
)

IMPORTANCE_MAGIC = b"CVW1"

# |beta| above this counts as a nonzero coefficient (numerical zero guard)
SUPPORT_EPS = 1e-10

# default grid for cross-validated penalty search, as fractions of the
# smallest penalty that zeroes every coefficient
DEFAULT_GRID_RATIOS = (0.5, 0.3, 0.15, 0.08, 0.04, 0.02)


def _segment_sums(values, indptr):
    """Sum ``values`` over contiguous segments; exact for integer dtypes."""
    cs = np.concatenate(([0], np.cumsum(values)))
    return cs[indptr[1:]] - cs[indptr[:-1]]


@dataclass
class RegressionInstance:
    """One anchor row's distance regression, design stored implicitly.

    ``col_rows[col_indptr[k]:col_indptr[k+1]]`` lists the observation
    positions (0..n_obs-1, anchor removed) where matrix column k is set;
    design column k is that indicator XOR'd with ``col_flip[k]``.
    """

    anchor_row: int
    n_obs: int
    n_features: int
    responses: np.ndarray
    col_indptr: np.ndarray
    col_rows: np.ndarray
    col_flip: np.ndarray
    col_nnz: np.ndarray      # popcount of each design column after the flip
    link: str = "identity"
    _y_total: float = field(init=False, repr=False)

    def __post_init__(self):
        self._y_total = float(self.responses.sum())

    def active_mask(self):
        """Columns whose design column is not identically zero."""
        return self.col_nnz > 0

    def n_active(self):
        return int(np.count_nonzero(self.col_nnz))

    def col_dot(self, v, v_total=None):
        """<z_k, v> for every design column k, as one vectorized pass."""
        if v_total is None:
            v_total = v.sum()
        base = _segment_sums(v[self.col_rows], self.col_indptr)
        return np.where(self.col_flip, v_total - base, base).astype(np.float64)

    def design_column(self, k):
        """Dense 0/1 design column k."""
        z = np.zeros(self.n_obs, dtype=np.float64)
        z[self.col_rows[self.col_indptr[k] : self.col_indptr[k + 1]]] = 1.0
        if self.col_flip[k]:
            z = 1.0 - z
        return z

    def dense_design(self):
        """Materialized (n_obs, n_features) design; small instances only."""
        Z = np.zeros((self.n_obs, self.n_features), dtype=np.float64)
        for k in range(self.n_features):
            Z[:, k] = self.design_column(k)
        return Z

    def predict(self, beta):
        """Fitted responses Z @ beta using only the nonzero coefficients."""
        out = np.zeros(self.n_obs, dtype=np.float64)
        for k in np.flatnonzero(beta):
            sup = self.col_rows[self.col_indptr[k] : self.col_indptr[k + 1]]
            if self.col_flip[k]:
                out += beta[k]
                out[sup] -= beta[k]
            else:
                out[sup] += beta[k]
        return out

    def subset(self, positions):
        """Restrict to the given observation positions (for CV folds)."""
        positions = np.asarray(positions, dtype=np.int64)
        pos_map = np.full(self.n_obs, -1, dtype=np.int64)
        pos_map[positions] = np.arange(positions.size)
        mapped = pos_map[self.col_rows]
        keep = mapped >= 0
        new_counts = _segment_sums(keep.astype(np.int64), self.col_indptr)
        new_indptr = np.zeros(self.n_features + 1, dtype=np.int64)
        np.cumsum(new_counts, out=new_indptr[1:])
        new_nnz = np.where(self.col_flip, positions.size - new_counts, new_counts)
        return RegressionInstance(
            anchor_row=self.anchor_row,
            n_obs=positions.size,
            n_features=self.n_features,
            responses=self.responses[positions],
            col_indptr=new_indptr,
            col_rows=mapped[keep].astype(np.int32),
            col_flip=self.col_flip,
            col_nnz=new_nnz.astype(np.int64),
            link=self.link,
        )


@dataclass
class LassoSolution:
    beta: np.ndarray
    lam: float
    n_iterations: int
    kkt_violation: float

    def support(self):
        return np.flatnonzero(np.abs(self.beta) > SUPPORT_EPS).astype(np.int32)


@dataclass
class ImportanceMatrix:
    """Binary m x p matrix of per-row importance supports."""

    m: int
    p: int
    w_rows: list
    row_ids: np.ndarray            # source rows in the training matrix
    betas: list = None             # optional per-row (indices, values) pairs
    row_lambdas: np.ndarray = None
    row_kkt: np.ndarray = None

    def dense(self, dtype=np.float64):
        W = np.zeros((self.m, self.p), dtype=dtype)
        for i, sup in enumerate(self.w_rows):
            W[i, sup] = 1
        return W

    def save(self, path, meta_path=None):
        write_rowset_file(path, IMPORTANCE_MAGIC, self.w_rows, self.p)
        if meta_path is not None:
            meta = {
                "row_ids": [int(i) for i in self.row_ids],
                "lambda": None
                if self.row_lambdas is None
                else [float(v) for v in self.row_lambdas],
                "kkt_violation": None
                if self.row_kkt is None
                else [float(v) for v in self.row_kkt],
            }
            with open(meta_path, "w", encoding="utf-8") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
                fh.write("\n")

    @classmethod
    def load(cls, path, meta_path=None):
        rows, p = read_rowset_file(path, IMPORTANCE_MAGIC)
        row_ids = np.arange(len(rows), dtype=np.int64)
        lambdas = kkt = None
        if meta_path is not None:
            with open(meta_path, encoding="utf-8") as fh:
                meta = json.load(fh)
            row_ids = np.asarray(meta["row_ids"], dtype=np.int64)
            if meta.get("lambda") is not None:
                lambdas = np.asarray(meta["lambda"], dtype=np.float64)
            if meta.get("kkt_violation") is not None:
                kkt = np.asarray(meta["kkt_violation"], dtype=np.float64)
        return cls(
            m=len(rows),
            p=p,
            w_rows=rows,
            row_ids=row_ids,
            row_lambdas=lambdas,
            row_kkt=kkt,
        )


def build_regression_instance(Dstar, i, link="identity"):
    """Set up the distance regression anchored at row i of the sample.

    Responses are the anchor's distances to every other row; with the
    identity link they are exactly (1/p) times the design row sums, so the
    regression is a pure variable-screening device.
    """
    m = Dstar.n_rows
    p = Dstar.n_cols
    if m < 3:
        raise ContractViolation(f"need at least 3 sample rows, got {m}")
    if not 0 <= i < m:
        raise ContractViolation(f"anchor row {i} out of range [0, {m})")
    if link not in ("identity", "logit"):
        raise ContractViolation(f"unknown link {link!r}")

    anchor = Dstar.row(i)
    anchor_mask = np.zeros(p, dtype=np.int64)
    anchor_mask[anchor] = 1

    # distances from the anchor to every row, via per-row intersection counts
    indptr, indices = Dstar.row_major_arrays()
    inter = _segment_sums(anchor_mask[indices], indptr)
    row_sums = np.diff(indptr)
    dist = (anchor.size + row_sums - 2 * inter) / p
    responses = np.delete(dist, i)
    if link == "logit":
        eps = 0.5 / p
        responses = np.log((responses + eps) / (1.0 - responses + eps))

    # column supports with the anchor row removed and positions reindexed
    col_indptr, col_row_ids = Dstar.csc_arrays()
    keep = col_row_ids != i
    new_rows = col_row_ids[keep].astype(np.int64)
    new_rows[new_rows > i] -= 1
    removed = np.zeros(p, dtype=np.int64)
    removed[anchor] = 1
    new_counts = np.diff(col_indptr) - removed
    new_indptr = np.zeros(p + 1, dtype=np.int64)
    np.cumsum(new_counts, out=new_indptr[1:])

    flip = anchor_mask.astype(bool)
    col_nnz = np.where(flip, (m - 1) - new_counts, new_counts)
    return RegressionInstance(
        anchor_row=i,
        n_obs=m - 1,
        n_features=p,
        responses=responses.astype(np.float64),
        col_indptr=new_indptr,
        col_rows=new_rows.astype(np.int32),
        col_flip=flip,
        col_nnz=col_nnz.astype(np.int64),
        link=link,
    )


def _soft_threshold(rho, thresh):
    if rho > thresh:
        return rho - thresh
    if rho < -thresh:
        return rho + thresh
    return 0.0


def _kkt_violations(g, beta, lam):
    """Per-coordinate stationarity residuals for g = 2 Z'(y - Z beta)."""
    viol = np.maximum(np.abs(g) - lam, 0.0)
    on = np.abs(beta) > SUPPORT_EPS
    viol[on] = np.abs(g[on] - lam * np.sign(beta[on]))
    return viol


def lasso_fit(instance, lam, tol=1e-7, max_iter=1000):
    """Minimize ||y - Z b||^2 + lam * ||b||_1 by cyclic coordinate descent.

    Covariance updating: inner products of design columns are cached the
    first time a coordinate becomes active, and the gradient is maintained
    through them instead of through an explicit residual. Converged when
    every coordinate satisfies its KKT condition within ``tol``.
    """
    if lam <= 0:
        raise ContractViolation(f"lambda must be positive, got {lam}")
    if tol <= 0 or max_iter < 1:
        raise ContractViolation("tol must be positive and max_iter >= 1")
    if instance.n_active() == 0:
        raise DegenerateInstanceError(
            f"row {instance.anchor_row}: all design columns are identically zero"
        )

    p = instance.n_features
    y = instance.responses
    c = instance.col_dot(y, instance._y_total)      # <z_k, y>
    nk = instance.col_nnz.astype(np.float64)        # <z_k, z_k>, columns are 0/1
    usable = instance.col_nnz > 0

    beta = np.zeros(p, dtype=np.float64)
    q = np.zeros(p, dtype=np.float64)               # sum_l beta_l <z_k, z_l>
    gram = {}

    def gram_row(k):
        row = gram.get(k)
        if row is None:
            zk = instance.design_column(k)
            row = instance.col_dot(zk, float(instance.col_nnz[k]))
            gram[k] = row
        return row

    half_lam = 0.5 * lam
    active = []
    active_set = set()
    n_pass = 0
    kkt = np.inf

    while True:
        # full scan over all coordinates via the covariance identity
        g = 2.0 * (c - q)
        viol = _kkt_violations(g, beta, lam)
        viol[~usable] = 0.0
        kkt = float(viol.max()) if p else 0.0
        if kkt <= tol:
            return LassoSolution(
                beta=beta, lam=lam, n_iterations=n_pass, kkt_violation=kkt
            )
        if n_pass >= max_iter:
            raise ConvergenceError(
                f"row {instance.anchor_row}: coordinate descent did not reach "
                f"tol={tol} within {max_iter} passes (kkt={kkt:.3e})",
                beta=beta,
                kkt_violation=kkt,
            )
        newly = np.flatnonzero(viol > tol)
        for k in newly:
            k = int(k)
            if k not in active_set:
                active_set.add(k)
                active.append(k)
        active.sort()

        # cycle the active set to stationarity before rescanning
        while n_pass < max_iter:
            n_pass += 1
            max_delta = 0.0
            for k in active:
                rho = c[k] - q[k] + beta[k] * nk[k]
                new = _soft_threshold(rho, half_lam) / nk[k]
                delta = new - beta[k]
                if delta != 0.0:
                    q += delta * gram_row(k)
                    beta[k] = new
                    max_delta = max(max_delta, abs(delta))
            g_act = 2.0 * (c[active] - q[active])
            v_act = _kkt_violations(g_act, beta[active], lam)
            if v_act.max() <= tol or max_delta == 0.0:
                break


def verify_kkt(instance, beta, lam):
    """Independent stationarity check: max KKT residual, from scratch.

    Rebuilds the residual column by column (no covariance caches, no state
    from the solver) so it can certify any claimed solution.
    """
    r = instance.responses.copy()
    for k in np.flatnonzero(beta):
        r -= beta[k] * instance.design_column(k)
    g = np.empty(instance.n_features, dtype=np.float64)
    for k in range(instance.n_features):
        g[k] = 2.0 * float(instance.design_column(k) @ r)
    viol = _kkt_violations(g, np.asarray(beta, dtype=np.float64), lam)
    return float(viol.max()) if viol.size else 0.0


def lambda_max(instance):
    """Smallest penalty at which the all-zero solution is stationary."""
    c = instance.col_dot(instance.responses, instance._y_total)
    c[instance.col_nnz == 0] = 0.0
    return float(np.abs(2.0 * c).max())


def auto_grid(instance, ratios=DEFAULT_GRID_RATIOS):
    lmax = lambda_max(instance)
    if lmax <= 0:
        return None
    return tuple(lmax * r for r in ratios)


def select_lambda(instance, grid, folds=5, seed=0, tol=1e-7, max_iter=1000):
    """Pick the penalty minimizing pooled k-fold held-out squared error.

    Ties break toward the larger penalty (sparser model). Deterministic
    given the seed: folds come from one seeded permutation of the
    observations.
    """
    grid = sorted(set(float(g) for g in grid), reverse=True)
    if not grid:
        raise ContractViolation("lambda grid must be non-empty")
    if any(g <= 0 for g in grid):
        raise ContractViolation("lambda grid values must be positive")
    if folds < 2 or folds > instance.n_obs:
        raise ContractViolation(
            f"folds must be in [2, {instance.n_obs}], got {folds}"
        )
    if instance.n_active() == 0:
        raise DegenerateInstanceError(
            f"row {instance.anchor_row}: degenerate instance, cannot cross-validate"
        )

    rng = np.random.default_rng(seed)
    perm = rng.permutation(instance.n_obs)
    chunks = np.array_split(perm, folds)

    sq_err = np.zeros(len(grid), dtype=np.float64)
    for held in chunks:
        train = np.sort(np.setdiff1d(perm, held, assume_unique=True))
        sub = instance.subset(train)
        hold = instance.subset(np.sort(held))
        beta = np.zeros(instance.n_features, dtype=np.float64)
        for gi, lam in enumerate(grid):
            if sub.n_active() > 0:
                try:
                    sol = lasso_fit(sub, lam, tol=tol, max_iter=max_iter)
                    beta = sol.beta
                except ConvergenceError as err:
                    beta = err.beta    # best iterate still usable for scoring
            resid = hold.responses - hold.predict(beta)
            sq_err[gi] += float(resid @ resid)

    mse = sq_err / instance.n_obs
    best = mse.min()
    for gi, lam in enumerate(grid):        # grid is descending: first hit is
        if mse[gi] == best:                # the largest tied penalty
            return lam
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class FixedLambda:
    """Use one externally supplied penalty for every row."""

    lam: float


@dataclass(frozen=True)
class CrossValidatedLambda:
    """Cross-validated penalty selection.

    With ``per_row=False`` (the throughput default) a subsample of
    ``probe_rows`` rows is cross-validated and the median chosen penalty is
    broadcast to all rows; with ``per_row=True`` every row gets its own CV.
    ``grid=None`` derives the grid from the data as ``ratios`` times the
    observed lambda_max.
    """

    grid: tuple = None
    folds: int = 5
    per_row: bool = False
    probe_rows: int = 50
    ratios: tuple = DEFAULT_GRID_RATIOS


@dataclass
class RowFitFailure:
    row: int
    reason: str


def _fit_row(instance, lam, tol, max_iter):
    sol = lasso_fit(instance, lam, tol=tol, max_iter=max_iter)
    return sol.support(), sol


def _broadcast_lambda(Dstar, policy, tol, max_iter, seed):
    """Median CV-chosen penalty over a deterministic probe subsample."""
    m = Dstar.n_rows
    rng = np.random.default_rng([seed, 9173])
    n_probe = min(policy.probe_rows, m)
    probes = np.sort(rng.choice(m, size=n_probe, replace=False))

    instances = []
    for i in probes:
        inst = build_regression_instance(Dstar, int(i))
        if inst.n_active() > 0:
            instances.append(inst)
    if not instances:
        return None

    if policy.grid is not None:
        grid = tuple(policy.grid)
    else:
        lmax = float(np.median([lambda_max(inst) for inst in instances]))
        if lmax <= 0:
            return None
        grid = tuple(lmax * r for r in policy.ratios)

    chosen = []
    for inst in instances:
        try:
            chosen.append(select_lambda(inst, grid, folds=policy.folds, seed=seed,
                                        tol=tol, max_iter=max_iter))
        except DegenerateInstanceError:
            continue
    if not chosen:
        return None
    return float(np.median(chosen))


def estimate_importance(
    Dstar,
    lambda_policy,
    tol=1e-7,
    max_iter=1000,
    seed=0,
    on_failure="raise",
    threads=1,
    link="identity",
):
    """Fit the distance regression for every sample row and stack supports.

    Rows are independent; with ``threads > 1`` they are fitted by a thread
    pool, and results do not depend on execution order. Failed rows
    (degenerate design or non-convergence) are collected into a report:
    ``on_failure="raise"`` aborts with it, ``"drop"`` removes those rows
    from the result.

    Returns (ImportanceMatrix, failures).
    """
    if on_failure not in ("raise", "drop"):
        raise ContractViolation(f"on_failure must be 'raise' or 'drop', got {on_failure!r}")
    m = Dstar.n_rows
    p = Dstar.n_cols

    broadcast = None
    if isinstance(lambda_policy, FixedLambda):
        broadcast = float(lambda_policy.lam)
    elif isinstance(lambda_policy, CrossValidatedLambda):
        if not lambda_policy.per_row:
            broadcast = _broadcast_lambda(Dstar, lambda_policy, tol, max_iter, seed)
            if broadcast is None:
                broadcast = 1.0   # every fit will fail as degenerate below
    else:
        raise ContractViolation(f"unknown lambda policy {lambda_policy!r}")

    def run_row(i):
        try:
            inst = build_regression_instance(Dstar, i, link=link)
            if isinstance(lambda_policy, CrossValidatedLambda) and broadcast is None:
                grid = lambda_policy.grid or auto_grid(inst, lambda_policy.ratios)
                if grid is None:
                    raise DegenerateInstanceError(f"row {i}: zero lambda_max")
                lam = select_lambda(inst, grid, folds=lambda_policy.folds,
                                    seed=seed, tol=tol, max_iter=max_iter)
            else:
                lam = broadcast
            support, sol = _fit_row(inst, lam, tol, max_iter)
            return i, support, sol, None
        except (DegenerateInstanceError, ConvergenceError) as err:
            return i, None, None, RowFitFailure(row=i, reason=str(err))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_row, range(m)))
    else:
        results = [run_row(i) for i in range(m)]

    failures = [r[3] for r in results if r[3] is not None]
    if failures and on_failure == "raise":
        raise ImportanceFailureError(
            f"{len(failures)} of {m} row fits failed "
            f"(first: {failures[0].reason})",
            failures,
        )

    kept = [r for r in results if r[3] is None]
    w_rows = [r[1] for r in kept]
    row_ids = np.asarray([r[0] for r in kept], dtype=np.int64)
    lambdas = np.asarray([r[2].lam for r in kept], dtype=np.float64)
    kkts = np.asarray([r[2].kkt_violation for r in kept], dtype=np.float64)
    betas = [
        (r[1], r[2].beta[r[1]].copy()) for r in kept
    ]
    W = ImportanceMatrix(
        m=len(kept),
        p=p,
        w_rows=w_rows,
        row_ids=row_ids,
        betas=betas,
        row_lambdas=lambdas,
        row_kkt=kkts,
    )
    return W, failures
