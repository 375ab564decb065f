import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from tilestream.errors import DataError, RankDeficientError, ShapeError
from tilestream.reduce import (ProSVD, Reducer, build_projection, principal_angles, project,
                               prosvd_init, prosvd_project, prosvd_update)
from tilestream.simulate import write_matrix, load_matrix

from oracles import offline_top_subspace, principal_angles_dense


# -- sparse projection ------------------------------------------------------

def test_projection_is_deterministic():
    P1 = build_projection(100, 20, seed=7, mode="achlioptas")
    P2 = build_projection(100, 20, seed=7, mode="achlioptas")
    a, b = P1.matrix.tocoo(), P2.matrix.tocoo()
    assert np.array_equal(a.row, b.row) and np.array_equal(a.col, b.col)
    assert np.array_equal(a.data, b.data)
    P3 = build_projection(100, 20, seed=8, mode="achlioptas")
    assert (P1.matrix != P3.matrix).nnz > 0


def test_achlioptas_density_and_values():
    d, n = 2000, 60
    P = build_projection(d, n, seed=1)
    total = d * n
    frac = P.matrix.nnz / total
    sigma = np.sqrt((1 / 3) * (2 / 3) / total)
    assert abs(frac - 1 / 3) < 3 * sigma
    vals = np.unique(P.matrix.data)
    assert np.allclose(np.abs(vals), np.sqrt(3.0 / n))
    pos = np.mean(P.matrix.data > 0)
    assert abs(pos - 0.5) < 0.02


def test_very_sparse_density():
    d, n = 10000, 50
    P = build_projection(d, n, seed=3, mode="very-sparse")
    p = 1 / np.sqrt(d)
    sigma = np.sqrt(p * (1 - p) / (d * n))
    assert abs(P.matrix.nnz / (d * n) - p) < 4 * sigma
    assert np.allclose(np.abs(P.matrix.data), np.sqrt(np.sqrt(d) / n))


@pytest.mark.parametrize("mode", ["achlioptas", "very-sparse"])
def test_projection_preserves_norm_in_expectation(mode):
    d, n = 1000, 50
    rng = np.random.default_rng(0)
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    seeds = 10000 if mode == "achlioptas" else 3000
    sq = np.empty(seeds)
    for s in range(seeds):
        y = project(build_projection(d, n, seed=s, mode=mode), x)
        sq[s] = y @ y
    tol = 0.02 if mode == "achlioptas" else 0.04
    assert abs(sq.mean() - 1.0) < tol


def test_projection_argument_errors():
    with pytest.raises(ValueError):
        build_projection(10, 20)
    with pytest.raises(ValueError):
        build_projection(10, 0)
    with pytest.raises(ValueError):
        build_projection(10, 5, mode="dense")
    P = build_projection(30, 5)
    with pytest.raises(ShapeError):
        project(P, np.zeros((29, 2)))


def test_project_zero_and_linearity():
    P = build_projection(300, 40, seed=2)
    rng = np.random.default_rng(1)
    X, Y = rng.standard_normal((300, 5)), rng.standard_normal((300, 5))
    assert np.array_equal(project(P, np.zeros((300, 3))), np.zeros((40, 3)))
    lhs = project(P, 2.5 * X - 0.75 * Y)
    rhs = 2.5 * project(P, X) - 0.75 * project(P, Y)
    assert np.max(np.abs(lhs - rhs)) < 1e-12
    dense = P.matrix.toarray()
    assert np.allclose(project(P, X), dense.T @ X, atol=1e-12)


# -- proSVD ----------------------------------------------------------------

def test_init_with_canonical_columns():
    n, k = 12, 4
    X0 = np.eye(n)[:, :k]
    s = prosvd_init(X0, k)
    assert np.array_equal(s.Q, X0)
    assert np.array_equal(s.R, np.eye(k))


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=5),
       st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_init_orthonormal_and_reconstructs(k, extra, seed):
    rng = np.random.default_rng(seed)
    n = k + 5
    X0 = rng.standard_normal((n, k + extra))
    s = prosvd_init(X0, k)
    assert np.max(np.abs(s.Q.T @ s.Q - np.eye(k))) < 1e-12
    if extra == 0:
        rel = np.linalg.norm(s.Q @ s.R - X0) / np.linalg.norm(X0)
        assert rel < 1e-10
    assert np.all(np.diag(s.R) > 0)


def test_init_rank_deficient():
    X0 = np.zeros((10, 3))
    X0[0, 0] = 1.0
    with pytest.raises(RankDeficientError):
        prosvd_init(X0, 3)
    X1 = np.ones((10, 3))
    with pytest.raises(RankDeficientError):
        prosvd_init(X1, 2)


def test_init_argument_errors():
    with pytest.raises(ValueError):
        prosvd_init(np.ones((5, 2)), 3)
    with pytest.raises(DataError):
        prosvd_init(np.full((5, 3), np.nan), 2)


def _converged_state(rng, n=30, k=4):
    basis = np.linalg.qr(rng.standard_normal((n, k)))[0]
    s = prosvd_init(basis @ rng.standard_normal((k, k)), k)
    for _ in range(5):
        s.update(basis @ rng.standard_normal((k, 3)))
    return s, basis


def test_update_inside_span_keeps_basis():
    rng = np.random.default_rng(4)
    s, basis = _converged_state(rng)
    Q_before = s.Q.copy()
    s.update(basis @ rng.standard_normal((4, 5)))
    assert np.max(np.abs(s.Q - Q_before)) < 1e-10


def test_update_orthonormal_every_step():
    rng = np.random.default_rng(5)
    n, k = 40, 5
    s = prosvd_init(rng.standard_normal((n, k)), k, decay=0.99)
    for _ in range(200):
        s.update(rng.standard_normal((n, 3)) * rng.uniform(0.1, 10))
        assert np.max(np.abs(s.Q.T @ s.Q - np.eye(k))) < 1e-10
        assert np.all(np.isfinite(s.R))


def test_streaming_recovers_offline_subspace():
    rng = np.random.default_rng(6)
    n, k, b, batches = 100, 6, 20, 50
    basis = np.linalg.qr(rng.standard_normal((n, k)))[0]
    data = basis @ (rng.standard_normal((k, b * batches)) * np.linspace(5, 1, k)[:, None])
    s = prosvd_init(data[:, :k], k)
    for i in range(batches):
        lo = max(k, i * b)
        s.update(data[:, lo:(i + 1) * b])
    ref = offline_top_subspace(data, k)
    assert np.max(principal_angles_dense(ref, s.Q)) < 1e-8
    # same data, tracked singular values equal the offline ones
    sv = np.linalg.svd(data, compute_uv=False)[:k]
    assert np.allclose(np.sort(s.singular_values())[::-1], sv, rtol=1e-9)


def test_streaming_matches_offline_top_k_for_full_rank_data_with_gap():
    # with decay=1 and data whose top-k subspace is well separated
    rng = np.random.default_rng(8)
    n, k = 30, 3
    basis = np.linalg.qr(rng.standard_normal((n, n)))[0]
    scales = np.r_[np.full(k, 50.0), np.full(n - k, 1e-9)]
    data = basis @ (scales[:, None] * rng.standard_normal((n, 400)))
    s = prosvd_init(data[:, :k], k)
    s.update(data[:, k:])
    ref = offline_top_subspace(data, k)
    assert np.max(principal_angles_dense(ref, s.Q)) < 1e-6


def _random_rotation(rng, k):
    Q, R = np.linalg.qr(rng.standard_normal((k, k)))
    return Q * np.sign(np.diag(R))


def test_procrustes_minimality_against_random_rotations():
    rng = np.random.default_rng(9)
    n, k = 50, 6
    s = prosvd_init(rng.standard_normal((n, k)), k)
    for _ in range(10):
        s.update(rng.standard_normal((n, 4)))
    Q_prev = s.Q.copy()
    unrotated = s.copy()
    unrotated.procrustes = False
    s.update(X := rng.standard_normal((n, 4)))
    unrotated.update(X)
    # both bases span the same subspace; the unrotated one is Q_hat U1
    assert np.max(principal_angles(s.Q, unrotated.Q)) < 1e-8
    best = np.linalg.norm(s.Q - Q_prev)
    base = unrotated.Q
    assert best <= np.linalg.norm(base - Q_prev) + 1e-12
    for _ in range(100):
        T = _random_rotation(rng, k)
        assert best <= np.linalg.norm(base @ T.T - Q_prev) + 1e-12


def test_inner_block_keeps_singular_values():
    rng = np.random.default_rng(10)
    n, k = 25, 4
    s = prosvd_init(rng.standard_normal((n, k)), k, decay=0.9)
    Q, R = s.Q.copy(), s.R.copy()
    X = rng.standard_normal((n, 3))
    s.update(X)
    # singular values of the augmented block, discounted
    C = Q.T @ X
    Xp = X - Q @ C
    Qp, Rp = np.linalg.qr(Xp)
    R_hat = np.block([[R, C], [np.zeros((3, k)), Rp]])
    sv = 0.9 * np.linalg.svd(R_hat, compute_uv=False)[:k]
    assert np.allclose(np.sort(s.singular_values())[::-1], sv, rtol=1e-10)


def test_update_errors():
    rng = np.random.default_rng(11)
    s = prosvd_init(rng.standard_normal((10, 3)), 3)
    with pytest.raises(DataError):
        s.update(np.full((10, 2), np.inf))
    with pytest.raises(ShapeError):
        s.update(np.ones((9, 2)))
    with pytest.raises(ValueError):
        ProSVD(s.Q, s.R, decay=0.0)


def test_prosvd_update_function_and_project():
    rng = np.random.default_rng(12)
    n, k = 20, 4
    s = prosvd_init(rng.standard_normal((n, k)), k)
    s = prosvd_update(s, rng.standard_normal((n, 2)))
    for j in range(k):
        assert np.allclose(prosvd_project(s, s.Q[:, j]), np.eye(k)[j], atol=1e-12)
    x = rng.standard_normal(n)
    x_perp = x - s.Q @ (s.Q.T @ x)
    assert np.max(np.abs(prosvd_project(s, x_perp))) < 1e-10
    for _ in range(50):
        x = rng.standard_normal(n) * rng.uniform(0.01, 100)
        assert np.linalg.norm(prosvd_project(s, x)) <= np.linalg.norm(x) * (1 + 1e-12)
    with pytest.raises(ShapeError):
        prosvd_project(s, np.ones(n + 1))


def test_degenerate_batch_stays_finite():
    rng = np.random.default_rng(13)
    s, basis = _converged_state(rng, n=15, k=3)
    s.update(np.zeros((15, 4)))
    assert np.all(np.isfinite(s.Q)) and np.all(np.isfinite(s.R))
    s.update(s.Q[:, :1] * 3.0)
    assert np.max(np.abs(s.Q.T @ s.Q - np.eye(3))) < 1e-10


def test_state_round_trips_through_matrix_files(tmp_path):
    rng = np.random.default_rng(14)
    s = prosvd_init(rng.standard_normal((20, 4)), 4)
    s.update(rng.standard_normal((20, 6)))
    write_matrix(tmp_path / "Q.mflw", s.Q)
    write_matrix(tmp_path / "R.mflw", s.R)
    restored = ProSVD(load_matrix(tmp_path / "Q.mflw"), load_matrix(tmp_path / "R.mflw"))
    assert np.array_equal(restored.Q, s.Q) and np.array_equal(restored.R, s.R)


def test_principal_angles_helper_agrees_with_oracle():
    rng = np.random.default_rng(15)
    A, B = rng.standard_normal((30, 4)), rng.standard_normal((30, 4))
    ours = np.sort(principal_angles(A, B))
    ref = np.sort(principal_angles_dense(A, B))
    assert np.allclose(ours, ref, atol=1e-10)
    assert np.allclose(ours, np.sort(scipy.linalg.subspace_angles(A, B)))


# -- reducer ------------------------------------------------------------------

def test_reducer_passthrough_and_buffering():
    rng = np.random.default_rng(16)
    X = rng.standard_normal((8, 30))
    r = Reducer(8, 8, 8)
    assert np.array_equal(r.transform_block(X), X)

    r = Reducer(50, 20, 3, seed=1)
    outs = [r.transform_block(X_) for X_ in np.split(rng.standard_normal((50, 10)), 10, axis=1)]
    assert outs[0] is None and outs[1] is None
    got = np.hstack([o for o in outs if o is not None])
    assert got.shape == (3, 10)


def test_reducer_recovers_lift_image():
    rng = np.random.default_rng(17)
    d, D = 400, 3
    basis = np.linalg.qr(rng.standard_normal((d, D)))[0]
    data = basis @ rng.standard_normal((D, 600))
    r = Reducer(d, d, D)
    for blk in np.split(data, 60, axis=1):
        r.transform_block(blk)
    assert np.max(principal_angles_dense(basis, r.svd.Q)) < 1e-6
