import numpy as np
import pytest

from covclust.errors import (
    ContractViolation,
    DegenerateInstanceError,
    ImportanceFailureError,
)
from covclust.importance import (
    CrossValidatedLambda,
    FixedLambda,
    build_regression_instance,
    estimate_importance,
    lambda_max,
    lasso_fit,
    select_lambda,
    verify_kkt,
)
from covclust.sparse import SparseBinaryMatrix

from _util import (
    brute_kkt_violation,
    dense_of,
    instance_from_dense,
    lasso_two_var_exact,
    matrix_from_dense,
    planted_dataset,
    random_sparse,
)


def _toy_dstar():
    rows = [
        np.array([0], dtype=np.int32),
        np.array([1], dtype=np.int32),
        np.array([0, 1], dtype=np.int32),
    ]
    return SparseBinaryMatrix(rows, 2)


def test_instance_hand_example():
    inst = build_regression_instance(_toy_dstar(), 0)
    assert inst.responses.tolist() == [1.0, 0.5]
    Z = inst.dense_design()
    assert Z.tolist() == [[1.0, 1.0], [0.0, 1.0]]


def test_instance_identical_rows_degenerate():
    rows = [np.array([1, 3], dtype=np.int32)] * 4
    D = SparseBinaryMatrix(rows, 5)
    inst = build_regression_instance(D, 2)
    assert np.all(inst.responses == 0.0)
    assert inst.n_active() == 0
    assert np.all(inst.dense_design() == 0.0)


def test_instance_out_of_range():
    with pytest.raises(ContractViolation):
        build_regression_instance(_toy_dstar(), 3)


def test_identity_link_identity():
    rng = np.random.default_rng(21)
    D = random_sparse(rng, 50, 10, 0.3)
    for i in (0, 17, 49):
        inst = build_regression_instance(D, i)
        Z = inst.dense_design()
        assert np.array_equal(inst.responses, Z.sum(axis=1) / D.n_cols)


def test_instance_matches_dense_xor():
    rng = np.random.default_rng(33)
    D = random_sparse(rng, 20, 8, 0.4)
    X = dense_of(D)
    i = 5
    others = np.delete(np.arange(20), i)
    expected = (X[others] != X[i][None, :]).astype(float)
    inst = build_regression_instance(D, i)
    assert np.array_equal(inst.dense_design(), expected)


def test_subset_matches_dense_slice():
    rng = np.random.default_rng(8)
    D = random_sparse(rng, 30, 12, 0.3)
    inst = build_regression_instance(D, 4)
    keep = np.array([0, 3, 7, 8, 20, 25])
    sub = inst.subset(keep)
    assert np.array_equal(sub.dense_design(), inst.dense_design()[keep])
    assert np.array_equal(sub.responses, inst.responses[keep])


def test_lasso_zero_responses():
    rng = np.random.default_rng(2)
    Z = (rng.random((15, 6)) < 0.5).astype(float)
    Z[:, Z.sum(axis=0) == 0] = 1.0
    inst = instance_from_dense(Z, np.zeros(15))
    sol = lasso_fit(inst, 0.3)
    assert np.all(sol.beta == 0.0)


def test_lasso_soft_threshold_closed_form():
    # single design column with one unit entry: z'z = 1, z'y = c
    for c, lam in [(0.8, 0.5), (-0.6, 0.4), (0.2, 0.5), (0.7, 2.0)]:
        y = np.zeros(9)
        y[3] = c
        Z = np.zeros((9, 1))
        Z[3, 0] = 1.0
        inst = instance_from_dense(Z, y)
        sol = lasso_fit(inst, lam, tol=1e-12)
        expected = np.sign(c) * max(abs(c) - lam / 2.0, 0.0)
        assert sol.beta[0] == pytest.approx(expected, abs=1e-8)


def test_lasso_kkt_certificate_random():
    rng = np.random.default_rng(17)
    for trial in range(30):
        D = random_sparse(rng, 30, 10, float(rng.uniform(0.15, 0.5)))
        i = int(rng.integers(30))
        inst = build_regression_instance(D, i)
        if inst.n_active() == 0:
            continue
        sol = lasso_fit(inst, 0.1, tol=1e-8)
        assert sol.kkt_violation <= 1e-8
        # independent verifier, built from the dense design
        assert verify_kkt(inst, sol.beta, 0.1) <= 1e-6
        Z = inst.dense_design()
        assert brute_kkt_violation(Z, inst.responses, sol.beta, 0.1) <= 1e-6


def test_lasso_two_var_exact_match():
    rng = np.random.default_rng(5)
    for _ in range(20):
        Z = (rng.random((12, 2)) < 0.5).astype(float)
        if Z.sum(axis=0).min() == 0:
            continue
        y = rng.random(12)
        lam = float(rng.uniform(0.05, 1.0))
        inst = instance_from_dense(Z, y)
        sol = lasso_fit(inst, lam, tol=1e-12)
        exact = lasso_two_var_exact(Z, y, lam)
        assert sol.beta == pytest.approx(exact, abs=1e-7)


def test_lasso_monotone_l1_in_lambda():
    rng = np.random.default_rng(9)
    for _ in range(10):
        D = random_sparse(rng, 25, 8, 0.35)
        inst = build_regression_instance(D, 0)
        if inst.n_active() == 0:
            continue
        norms = []
        for lam in (1.0, 0.3, 0.1, 0.03):
            sol = lasso_fit(inst, lam, tol=1e-10)
            norms.append(float(np.abs(sol.beta).sum()))
        assert all(a <= b + 1e-9 for a, b in zip(norms, norms[1:]))


def test_lasso_near_interpolation_at_tiny_lambda():
    # identity link makes the model exactly linear; with lambda -> 0 the fit
    # must reproduce the observed distances
    rng = np.random.default_rng(30)
    D = random_sparse(rng, 40, 6, 0.4)
    inst = build_regression_instance(D, 1)
    sol = lasso_fit(inst, 1e-9, tol=1e-12, max_iter=5000)
    fitted = inst.predict(sol.beta)
    assert np.abs(fitted - inst.responses).max() <= 1e-6


def test_lasso_requires_positive_lambda():
    inst = build_regression_instance(_toy_dstar(), 0)
    with pytest.raises(ContractViolation):
        lasso_fit(inst, 0.0)


def test_lasso_degenerate_instance():
    rows = [np.array([1], dtype=np.int32)] * 3
    D = SparseBinaryMatrix(rows, 3)
    inst = build_regression_instance(D, 0)
    with pytest.raises(DegenerateInstanceError):
        lasso_fit(inst, 0.1)


def test_select_lambda_single_grid():
    inst = build_regression_instance(_toy_dstar(), 0)
    assert select_lambda(inst, [0.25], folds=2) == 0.25


def test_select_lambda_tie_prefers_larger():
    # all-zero responses: every penalty fits beta = 0, identical CV error
    Z = np.ones((10, 2))
    inst = instance_from_dense(Z, np.zeros(10))
    assert select_lambda(inst, [0.5, 0.1], folds=2) == 0.5


def test_select_lambda_recovers_planted_support():
    rng = np.random.default_rng(44)
    Z = (rng.random((60, 12)) < 0.4).astype(float)
    true_cols = [1, 5, 9]
    y = Z[:, true_cols] @ np.array([0.6, 0.5, 0.4]) + rng.normal(0, 0.01, 60)
    inst = instance_from_dense(Z, y)
    lam = select_lambda(inst, [2.0, 1.0, 0.5, 0.2, 0.1, 0.05], folds=5, seed=3)
    sol = lasso_fit(inst, lam, tol=1e-10)
    assert set(true_cols) <= set(sol.support().tolist())


def test_select_lambda_degenerate():
    rows = [np.array([0], dtype=np.int32)] * 4
    D = SparseBinaryMatrix(rows, 2)
    inst = build_regression_instance(D, 0)
    with pytest.raises(DegenerateInstanceError):
        select_lambda(inst, [0.1], folds=2)


def test_estimate_importance_identical_rows_all_fail():
    rows = [np.array([0, 2], dtype=np.int32)] * 5
    D = SparseBinaryMatrix(rows, 4)
    with pytest.raises(ImportanceFailureError) as exc:
        estimate_importance(D, FixedLambda(0.1))
    assert len(exc.value.failures) == 5
    W, failures = estimate_importance(D, FixedLambda(0.1), on_failure="drop")
    assert W.m == 0 and len(failures) == 5


def test_estimate_importance_hand_instance():
    # the 3-row toy: for small lambda both categories stay in row 0's support
    D = _toy_dstar()
    W, failures = estimate_importance(D, FixedLambda(0.01))
    assert not failures
    assert W.w_rows[0].tolist() == [0, 1]
    inst = build_regression_instance(D, 0)
    exact = lasso_two_var_exact(inst.dense_design(), inst.responses, 0.01)
    sol = lasso_fit(inst, 0.01, tol=1e-12)
    assert sol.beta == pytest.approx(exact, abs=1e-8)


def test_estimate_importance_planted_two_groups():
    rng = np.random.default_rng(50)
    blocks = [np.arange(0, 12), np.arange(12, 24)]
    rows = []
    for i in range(60):
        probs = np.full(24, 0.01)
        probs[blocks[i % 2]] = 0.45
        rows.append(np.flatnonzero(rng.random(24) < probs).astype(np.int32))
    D = SparseBinaryMatrix(rows, 24)
    W, failures = estimate_importance(
        D, CrossValidatedLambda(per_row=False, probe_rows=20), seed=4,
        on_failure="drop",
    )
    assert W.m >= 55
    union = set(blocks[0].tolist()) | set(blocks[1].tolist())
    for idx, sup in zip(W.row_ids, W.w_rows):
        own = blocks[int(idx) % 2]
        sup_set = set(sup.tolist())
        assert sup_set
        assert len(sup_set & union) / len(sup_set) >= 0.9
        inside = len(sup_set & set(own.tolist()))
        assert inside / len(sup_set) >= 0.9


def test_permutation_equivariance():
    rng = np.random.default_rng(60)
    D = random_sparse(rng, 25, 10, 0.35)
    perm = rng.permutation(10)
    X = dense_of(D)
    Dp = matrix_from_dense(X[:, perm])
    W1, _ = estimate_importance(D, FixedLambda(0.05), tol=1e-10, on_failure="drop")
    W2, _ = estimate_importance(Dp, FixedLambda(0.05), tol=1e-10, on_failure="drop")
    assert W1.row_ids.tolist() == W2.row_ids.tolist()
    inv = np.argsort(perm)
    for s1, s2 in zip(W1.w_rows, W2.w_rows):
        assert sorted(perm[j] for j in s1.tolist()) == sorted(s2.tolist())


def test_threads_do_not_change_result():
    rng = np.random.default_rng(70)
    D = random_sparse(rng, 30, 12, 0.3)
    W1, _ = estimate_importance(D, FixedLambda(0.05), on_failure="drop")
    W2, _ = estimate_importance(D, FixedLambda(0.05), on_failure="drop", threads=4)
    assert [r.tolist() for r in W1.w_rows] == [r.tolist() for r in W2.w_rows]


def test_importance_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(80)
    D = random_sparse(rng, 20, 9, 0.35)
    W, _ = estimate_importance(D, FixedLambda(0.05), on_failure="drop")
    W.save(tmp_path / "w.cvw", tmp_path / "w.json")
    from covclust.importance import ImportanceMatrix

    W2 = ImportanceMatrix.load(tmp_path / "w.cvw", tmp_path / "w.json")
    assert W2.m == W.m and W2.p == W.p
    assert [r.tolist() for r in W2.w_rows] == [r.tolist() for r in W.w_rows]
    assert W2.row_lambdas == pytest.approx(W.row_lambdas)


def test_lambda_max_zeroes_everything():
    rng = np.random.default_rng(90)
    D = random_sparse(rng, 25, 8, 0.4)
    inst = build_regression_instance(D, 2)
    lmax = lambda_max(inst)
    sol = lasso_fit(inst, lmax * 1.0001, tol=1e-10)
    assert np.all(sol.beta == 0.0)
    sol2 = lasso_fit(inst, lmax * 0.9, tol=1e-10)
    assert np.any(sol2.beta != 0.0)
