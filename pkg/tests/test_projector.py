import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dotproj.errors import ContractError
from dotproj.projector import (
    baseline_subspace,
    combined_projection,
    coupling_jacobian,
    principal_angles,
    projection_from_basis,
    roni_subspace,
    top_eigenvectors,
)


def random_pairs(rng, ls, ld, connected=True):
    """Random bipartite pair list; with ``connected`` a spanning path is always included."""
    allp = [(i, j) for i in range(ls) for j in range(ld)]
    keep = set(tuple(p) for p in np.array(allp)[rng.random(len(allp)) < 0.4].tolist())
    if connected:
        # zig-zag path s0-d0-s1-d1-... reaches every optode
        for t in range(max(ls, ld)):
            keep.add((min(t, ls - 1), min(t, ld - 1)))
            keep.add((min(t + 1, ls - 1), min(t, ld - 1)))
    return np.array(sorted(keep))


def n_components(pairs, ls, ld):
    parent = list(range(ls + ld))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in pairs:
        parent[find(i)] = find(ls + j)
    used = set(pairs[:, 0].tolist()) | {ls + j for j in pairs[:, 1].tolist()}
    isolated = ls + ld - len(used)
    return len({find(a) for a in used}), isolated


def test_minimal_coupling_jacobian():
    Jc = coupling_jacobian([[0, 0]], 1, 1)
    assert np.array_equal(Jc.toarray(), [[1, 1, 0, 0], [0, 0, 1, 1]])


def test_large_coupling_jacobian_shape():
    pairs = np.array([(i, j) for i in range(15) for j in range(21)])[:210]
    Jc = coupling_jacobian(pairs, 15, 21)
    assert Jc.matrix.shape == (420, 72) and Jc.l == 36


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 8))
def test_incidence_counts(seed, ls, ld):
    rng = np.random.default_rng(seed)
    pairs = random_pairs(rng, ls, ld)
    J = coupling_jacobian(pairs, ls, ld).toarray()
    m, l = len(pairs), ls + ld
    assert np.all(J.sum(axis=1) == 2)
    counts = np.zeros(2 * l)
    for i, j in pairs:
        counts[i] += 1
        counts[ls + j] += 1
    counts[l:] = counts[:l]
    assert np.array_equal(J.sum(axis=0), counts)
    # amplitude and phase blocks have the same structure
    assert np.array_equal(J[:m, :l], J[m:, l:]) and not J[:m, l:].any() and not J[m:, :l].any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 8), st.booleans())
def test_coupling_rank_from_graph(seed, ls, ld, connected):
    rng = np.random.default_rng(seed)
    pairs = random_pairs(rng, ls, ld, connected)
    if len(pairs) == 0:
        return
    Jc = coupling_jacobian(pairs, ls, ld)
    comps, isolated = n_components(pairs, ls, ld)
    svd_rank = int(np.sum(np.linalg.svd(Jc.toarray(), compute_uv=False) > 1e-10 * np.sqrt(2)))
    assert svd_rank == 2 * (ls + ld - isolated - comps)
    P = projection_from_basis(Jc.matrix)
    assert P.nullspace_basis.shape[1] == svd_rank
    if connected:
        assert svd_rank == 2 * (ls + ld - 1)


def test_pair_index_out_of_range():
    with pytest.raises(ContractError):
        coupling_jacobian([[0, 3]], 1, 2)


def _assert_projection(P, B):
    M = P.P
    n = np.linalg.norm(M)
    assert np.array_equal(M, M.T)
    assert np.linalg.norm(M @ M - M) <= 1e-10 * n
    assert np.linalg.norm(M @ B) <= 1e-10 * max(np.linalg.norm(B), 1.0)
    assert P.rank == M.shape[0] - np.linalg.matrix_rank(B)
    assert P.check()["ok"]


def test_projection_annihilates_minimal_coupling():
    Jc = coupling_jacobian([[0, 0]], 1, 1)
    P = projection_from_basis(Jc.matrix)
    assert np.allclose(P.P @ Jc.toarray(), 0, atol=1e-15)
    _assert_projection(P, Jc.toarray())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 30), st.integers(1, 4))
def test_orthonormal_basis_rank(seed, n, k):
    k = min(k, n - 1)
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, k)))
    P = projection_from_basis(Q)
    assert P.rank == n - k
    _assert_projection(P, Q)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_range_invariance(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((12, 4))
    P = projection_from_basis(B).P
    perm = B[:, rng.permutation(4)] * rng.uniform(0.1, 10, 4)
    dup = np.hstack([B, B[:, :2]])
    assert np.allclose(projection_from_basis(perm).P, P, rtol=0, atol=1e-10)
    assert np.allclose(projection_from_basis(dup).P, P, rtol=0, atol=1e-10)


def test_zero_basis_gives_identity():
    with pytest.warns(UserWarning):
        P = projection_from_basis(np.zeros((5, 2)))
    assert np.array_equal(P.P, np.eye(5))


def test_wide_basis_is_rank_limited():
    # a single pair has a 2 x 4 coupling Jacobian of rank 2
    P = projection_from_basis(np.array([[1.0, 1, 0, 0], [0, 0, 1, 1]]))
    assert P.rank == 0 and np.allclose(P.P, 0, atol=1e-15)


def test_roni_rank_one():
    Jt = np.zeros((6, 4))
    Jt[:, 2] = [1.0, -2.0, 0.0, 3.0, 0.0, 1.0]
    V, w = roni_subspace(Jt, None, 1)
    u = Jt[:, 2] / np.linalg.norm(Jt[:, 2])
    assert np.allclose(V[:, 0], u, atol=1e-14)  # largest entry (3.0) positive
    assert w[0] == pytest.approx(np.sum(Jt[:, 2] ** 2))


def _spsd(rng, n, rank=None):
    A = rng.standard_normal((n, rank or n))
    return A @ A.T


def _dense_top(M, k):
    w, V = np.linalg.eigh(M)
    return V[:, np.argsort(w)[::-1][:k]]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_roni_subspace_matches_dense_eigensolve(seed, k):
    rng = np.random.default_rng(seed)
    Jt = rng.standard_normal((20, 30))
    A = _spsd(rng, 30)
    V, _ = roni_subspace(Jt, A, k)
    ref = _dense_top(Jt @ A @ Jt.T, k)
    assert V.shape == (20, k)
    assert np.max(principal_angles(V, ref)) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_eigen_subspace_optimality(seed, k):
    rng = np.random.default_rng(seed)
    Jt = rng.standard_normal((12, 25))
    A = _spsd(rng, 25)
    M = Jt @ A @ Jt.T
    V, _ = roni_subspace(Jt, A, k)
    best = np.trace(V.T @ M @ V)
    for _ in range(50):
        Q, _ = np.linalg.qr(rng.standard_normal((12, k)))
        assert np.trace(Q.T @ M @ Q) <= best * (1 + 1e-12)


def test_sign_convention():
    rng = np.random.default_rng(0)
    M = _spsd(rng, 8)
    V, _ = top_eigenvectors(M, 3)
    for c in range(3):
        assert V[np.argmax(np.abs(V[:, c])), c] > 0


def test_k_beyond_numerical_rank_truncates():
    rng = np.random.default_rng(1)
    M = _spsd(rng, 8, rank=2)
    with pytest.warns(UserWarning):
        V, _ = top_eigenvectors(M, 5)
    assert V.shape[1] == 2


def test_baseline_single_term_equals_roni():
    rng = np.random.default_rng(2)
    D = rng.standard_normal((10, 15))
    A = np.eye(15)
    V1, w1 = baseline_subspace([D], A, 3)
    V2, w2 = roni_subspace(D, A, 3)
    assert np.allclose(V1, V2, atol=1e-12) and np.allclose(w1, w2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 5.0))
def test_baseline_rescaling_matches_recomputed_eigensolve(seed, scale):
    rng = np.random.default_rng(seed)
    D1, D2 = rng.standard_normal((10, 15)), rng.standard_normal((10, 15))
    A = _spsd(rng, 15)
    V, _ = baseline_subspace([scale * D1, D2], A, 3)
    ref = _dense_top(scale**2 * D1 @ A @ D1.T + D2 @ A @ D2.T, 3)
    assert np.max(principal_angles(V, ref)) <= 1e-8


def test_baseline_shape_mismatch():
    with pytest.raises(ContractError):
        baseline_subspace([np.ones((4, 3)), np.ones((4, 2))])


def test_combined_without_eigen_blocks_equals_coupling():
    pairs = np.array([[0, 0], [0, 1], [1, 1], [1, 2], [2, 0]])
    Jc = coupling_jacobian(pairs, 3, 3)
    assert np.allclose(combined_projection(Jc).P, projection_from_basis(Jc.matrix).P, atol=1e-14)


def test_combined_duplicate_column_invariance():
    rng = np.random.default_rng(4)
    pairs = np.array([(i, j) for i in range(3) for j in range(4)])
    Jc = coupling_jacobian(pairs, 3, 4)
    Vt = rng.standard_normal((24, 3))
    P1 = combined_projection(Jc, Vt)
    P2 = combined_projection(Jc, np.hstack([Vt, Vt[:, :1]]))
    assert np.allclose(P1.P, P2.P, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_combined_range_matches_stack(seed):
    rng = np.random.default_rng(seed)
    pairs = np.array([(i, j) for i in range(2) for j in range(5)])
    Jc = coupling_jacobian(pairs, 2, 5)
    Vt, V = rng.standard_normal((20, 2)), rng.standard_normal((20, 2))
    P = combined_projection(Jc, Vt, V)
    stack = np.hstack([Jc.toarray(), Vt, V])
    assert np.max(principal_angles(P.nullspace_basis, stack)) <= 1e-8
    _assert_projection(P, stack)


def test_combined_row_mismatch():
    with pytest.raises(ContractError):
        combined_projection(np.ones((4, 1)), np.ones((5, 1)))


@pytest.mark.parametrize("theta", [0.0, 1e-12, 1e-6, 0.3, 1.2, np.pi / 2])
def test_principal_angle_between_lines(theta):
    a = np.array([[1.0], [0.0], [0.0]])
    b = np.array([[np.cos(theta)], [np.sin(theta)], [0.0]])
    assert principal_angles(a, b)[0] == pytest.approx(theta, rel=1e-10, abs=1e-15)
