"""Orthogonal projections that remove nuisance directions from the data space."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractError

RANK_TOL = 1e-10


@dataclass(frozen=True)
class CouplingJacobian:
    """0/1 matrix linking coupling log-amplitudes and phases to the data.

    Columns: source lnA, detector lnA, source phase, detector phase.
    """

    matrix: sp.csr_matrix
    n_sources: int
    n_detectors: int

    @property
    def l(self) -> int:
        return self.n_sources + self.n_detectors

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def coupling_jacobian(pairs, n_sources: int, n_detectors: int) -> CouplingJacobian:
    """Build the coupling Jacobian for pairs ``(source, detector)`` in frame order.

    Amplitude row ``k`` has ones at columns ``i`` and ``l_s + j``; phase row
    ``k + m`` at ``l + i`` and ``l + l_s + j``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (
        pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n_sources
        or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= n_detectors
    ):
        raise ContractError("pair index out of range for the optode counts")
    m = len(pairs)
    l = n_sources + n_detectors
    k = np.arange(m)
    rows = np.concatenate([k, k, k + m, k + m])
    cols = np.concatenate([pairs[:, 0], n_sources + pairs[:, 1], l + pairs[:, 0], l + n_sources + pairs[:, 1]])
    mat = sp.csr_matrix((np.ones(4 * m), (rows, cols)), shape=(2 * m, 2 * l))
    return CouplingJacobian(mat, int(n_sources), int(n_detectors))


@dataclass(frozen=True)
class ProjectionOperator:
    """``P = I - Q Q^T`` with ``Q`` an orthonormal basis of the nullspace."""

    P: np.ndarray
    nullspace_basis: np.ndarray
    provenance: str
    rank_tolerance: float = RANK_TOL
    singular_values: np.ndarray = field(default=None)
    eigenvalues: np.ndarray = field(default=None)

    @property
    def rank(self) -> int:
        return self.P.shape[0] - self.nullspace_basis.shape[1]

    @property
    def size(self) -> int:
        return self.P.shape[0]

    def apply(self, v):
        return self.P @ v

    def check(self, tol: float = 1e-10) -> dict:
        """Symmetry, idempotence and annihilation residuals."""
        P = self.P
        normP = np.linalg.norm(P)
        return {
            "symmetry": float(np.linalg.norm(P - P.T)),
            "idempotence": float(np.linalg.norm(P @ P - P) / normP) if normP else 0.0,
            "annihilation": float(np.linalg.norm(P @ self.nullspace_basis)) if self.nullspace_basis.size else 0.0,
            "ok": bool(
                np.array_equal(P, P.T)
                and (normP == 0 or np.linalg.norm(P @ P - P) <= tol * normP)
                and (not self.nullspace_basis.size or np.linalg.norm(P @ self.nullspace_basis) <= tol)
            ),
        }

    def metadata(self) -> dict:
        return {
            "provenance": self.provenance,
            "rank": self.rank,
            "k": int(self.nullspace_basis.shape[1]),
            "rank_tolerance": self.rank_tolerance,
            "eigenvalues": None if self.eigenvalues is None else np.asarray(self.eigenvalues).tolist(),
        }


def orthonormal_range(columns, rank_tolerance: float = RANK_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis of ``range(columns)`` by SVD, dropping relative singular values below tolerance."""
    B = columns.toarray() if sp.issparse(columns) else np.asarray(columns, dtype=float)
    if B.ndim != 2:
        raise ContractError("basis must be a 2-D matrix")
    if B.shape[1] == 0:
        return np.zeros((B.shape[0], 0)), np.zeros(0)
    U, s, _ = np.linalg.svd(B, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((B.shape[0], 0)), s
    keep = s > rank_tolerance * s[0]
    return U[:, keep], s


def projection_from_basis(columns, rank_tolerance: float = RANK_TOL, provenance: str = "coupling",
                          eigenvalues=None) -> ProjectionOperator:
    """Projection onto the orthogonal complement of ``range(columns)``.

    Rank-deficient inputs are handled by the SVD truncation, which makes this
    the pseudo-inverse form ``I - B (B^T B)^+ B^T``.
    """
    B = columns.toarray() if sp.issparse(columns) else np.asarray(columns, dtype=float)
    n = B.shape[0]
    Q, s = orthonormal_range(B, rank_tolerance)
    if Q.shape[1] == 0:
        warnings.warn("projection basis is zero; returning the identity", stacklevel=2)
    if Q.shape[1] == n:
        P = np.zeros((n, n))  # the basis spans everything
    else:
        P = np.eye(n) - Q @ Q.T
        P = 0.5 * (P + P.T)
    return ProjectionOperator(P, Q, provenance, rank_tolerance, singular_values=s, eigenvalues=eigenvalues)


def _fix_signs(V: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def top_eigenvectors(M: np.ndarray, k: int, rank_tolerance: float = RANK_TOL):
    """Unit eigenvectors of the symmetric PSD ``M`` for its ``k`` largest eigenvalues.

    When fewer than ``k`` eigenvalues exceed ``rank_tolerance`` times the
    largest, the basis is truncated with a warning. Returns ``(V, w)`` with
    ``w`` the full descending spectrum.
    """
    M = 0.5 * (M + M.T)
    n = M.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    w, V = np.linalg.eigh(M)
    w, V = w[::-1], V[:, ::-1]
    top = w[0] if w.size else 0.0
    numrank = int(np.sum(w > rank_tolerance * top)) if top > 0 else 0
    if k > numrank:
        warnings.warn(f"requested k={k} exceeds numerical rank {numrank}; basis truncated", stacklevel=3)
        k = numrank
    return _fix_signs(V[:, :k]), w


def _weighted_gram(J, A):
    """``J A J^T`` for dense ``J`` and dense/sparse symmetric ``A`` (``None`` means identity)."""
    J = np.asarray(J, dtype=float)
    if A is None:
        return J @ J.T
    AJt = A @ J.T
    return J @ np.asarray(AJt)


def roni_subspace(J_tilde, A_tilde=None, k: int = 1, rank_tolerance: float = RANK_TOL):
    """Leading eigenvectors of ``J~ A~ J~^T``: the data directions most affected by RONI changes.

    Returns ``(basis, eigenvalues)``; with ``A_tilde=None`` the basis is the
    leading left singular vectors of ``J_tilde``.
    """
    J_tilde = np.asarray(J_tilde, dtype=float)
    if J_tilde.shape[1] == 0:
        raise ContractError("RONI Jacobian has no columns")
    return top_eigenvectors(_weighted_gram(J_tilde, A_tilde), k, rank_tolerance)


def baseline_subspace(diff_jacobians, A=None, k: int = 1, rank_tolerance: float = RANK_TOL):
    """Leading eigenvectors of ``sum_i J^_i A J^_i^T`` over difference Jacobians."""
    diff_jacobians = list(diff_jacobians)
    if not diff_jacobians:
        raise ContractError("baseline_subspace needs at least one difference Jacobian")
    shape = np.shape(diff_jacobians[0])
    if any(np.shape(D) != shape for D in diff_jacobians):
        raise ContractError("difference Jacobians must share one shape")
    M = sum(_weighted_gram(D, A) for D in diff_jacobians)
    return top_eigenvectors(M, k, rank_tolerance)


def combined_projection(J_c=None, V_tilde=None, V=None, rank_tolerance: float = RANK_TOL) -> ProjectionOperator:
    """Projection whose nullspace is spanned by the stacked ``[J_c, V~, V]``; any block may be omitted."""
    blocks = []
    for b in (J_c, V_tilde, V):
        if b is None:
            continue
        if isinstance(b, CouplingJacobian):
            b = b.toarray()
        elif sp.issparse(b):
            b = b.toarray()
        blocks.append(np.asarray(b, dtype=float))
    if not blocks:
        raise ContractError("combined_projection needs at least one block")
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1:
        raise ContractError(f"blocks disagree in row dimension: {sorted(rows)}")
    return projection_from_basis(np.hstack(blocks), rank_tolerance, provenance="combined")


def principal_angles(A, B) -> np.ndarray:
    """Principal angles (radians, ascending) between ``range(A)`` and ``range(B)``.

    Small angles come from the sines (``arccos`` of cosines near 1 is only
    accurate to about 1e-8); angles above pi/4 from the cosines.
    """
    Qa, _ = orthonormal_range(A)
    Qb, _ = orthonormal_range(B)
    if Qa.shape[1] < Qb.shape[1]:
        Qa, Qb = Qb, Qa
    k = Qb.shape[1]
    if k == 0:
        return np.zeros(0)
    C = Qa.T @ Qb
    cos = np.linalg.svd(C, compute_uv=False)[:k]
    sin = np.sort(np.linalg.svd(Qb - Qa @ C, compute_uv=False))[:k]
    from_cos = np.arccos(np.clip(cos, -1.0, 1.0))
    from_sin = np.arcsin(np.clip(sin, 0.0, 1.0))
    return np.where(cos**2 >= 0.5, from_sin, from_cos)
