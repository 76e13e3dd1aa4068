"""Gaussian prior and the closed-form (projected) posterior estimators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import ContractError, NumericalError

COVARIANCE_MAX_N = 4000
TRUNCATION_FRACTION = 1e-4  # entries below (0.01 sigma)^2 = 1e-4 sigma^2 are dropped


def truncation_radius(d: float) -> float:
    """Distance beyond which the squared-exponential kernel falls below 1e-4 of its peak."""
    return d * math.sqrt(2.0 * math.log(1.0 / TRUNCATION_FRACTION))


@dataclass
class PriorModel:
    Gamma_x: sp.csr_matrix
    sigma: float
    d: float
    coords: np.ndarray

    @property
    def n(self) -> int:
        return self.Gamma_x.shape[0]

    def block(self, index) -> "PriorModel":
        """Diagonal block for a subset of the voxels (ROI or RONI)."""
        index = np.asarray(index, dtype=np.int64)
        sub = self.Gamma_x[index][:, index].tocsr()
        return PriorModel(sub, self.sigma, self.d, self.coords[index])

    def dense(self) -> np.ndarray:
        return self.Gamma_x.toarray()


def prior_covariance(coords, sigma: float = 0.003, d: float = 3.0) -> PriorModel:
    """Truncated squared-exponential covariance on voxel centers (mm).

    ``Gamma[i, j] = sigma^2 exp(-|z_i - z_j|^2 / (2 d^2))``, kept only where it
    exceeds ``(0.01 sigma)^2``.
    """
    if sigma <= 0 or d <= 0:
        raise ContractError("sigma and d must be positive")
    coords = np.asarray(coords, dtype=float).reshape(-1, 3)
    n = len(coords)
    s2 = sigma * sigma
    tree = cKDTree(coords)
    pairs = tree.query_pairs(truncation_radius(d) * (1 + 1e-9), output_type="ndarray")
    if len(pairs):
        dist2 = np.sum((coords[pairs[:, 0]] - coords[pairs[:, 1]]) ** 2, axis=1)
        val = s2 * np.exp(-dist2 / (2 * d * d))
        keep = val > (0.01 * sigma) ** 2
        pairs, val = pairs[keep], val[keep]
    else:
        val = np.zeros(0)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)]) if len(pairs) else np.arange(n)
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)]) if len(pairs) else np.arange(n)
    data = np.concatenate([val, val, np.full(n, s2)])
    G = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    G.sort_indices()
    return PriorModel(G, float(sigma), float(d), coords)


@dataclass
class PosteriorResult:
    mean: np.ndarray
    covariance: np.ndarray | None = None
    variance: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def _as_operator(G):
    if isinstance(G, PriorModel):
        return G.Gamma_x
    return G


def _solve_sym(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve the symmetric system with Bunch-Kaufman LDL^T plus one refinement step."""
    S = 0.5 * (S + S.T)
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e15:
        raise NumericalError(f"data-space system is ill-conditioned (cond ~ {cond:.3e})")
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            X = sla.solve(S, rhs, assume_a="sym")
            X += sla.solve(S, rhs - S @ X, assume_a="sym")
        except (sla.LinAlgError, sla.LinAlgWarning) as err:
            raise NumericalError(f"factorization failed (cond ~ {cond:.3e}): {err}") from err
    return X


def _posterior(J, Gamma_x, Gamma_e, y, covariance):
    J = np.asarray(J, dtype=float)
    y = np.asarray(y, dtype=float)
    Gamma_e = np.asarray(Gamma_e, dtype=float)
    if Gamma_e.ndim == 1:
        Gamma_e = np.diag(Gamma_e)
    G = _as_operator(Gamma_x)
    n = J.shape[1]
    if G.shape != (n, n) or Gamma_e.shape != (J.shape[0], J.shape[0]) or y.shape != (J.shape[0],):
        raise ContractError("posterior inputs have inconsistent shapes")
    GJt = np.asarray(G @ J.T)  # n x 2m
    S = J @ GJt + Gamma_e
    Z = _solve_sym(S, np.column_stack([y, GJt.T]))
    mean = GJt @ Z[:, 0]
    K = Z[:, 1:]  # S^-1 J Gamma_x
    diag = {"residual_norm": float(np.linalg.norm(y - J @ mean)), "system_cond": float(np.linalg.cond(S))}
    if covariance is None:
        covariance = n <= COVARIANCE_MAX_N
    cov = var = None
    if covariance:
        Gd = G.toarray() if sp.issparse(G) else np.asarray(G, dtype=float)
        cov = Gd - GJt @ K
        cov = 0.5 * (cov + cov.T)
        var = np.diag(cov).copy()
    else:
        gdiag = G.diagonal() if sp.issparse(G) else np.diag(G)
        var = gdiag - np.einsum("ij,ji->i", GJt, K)
    return PosteriorResult(mean, cov, var, diag)


def posterior(J, Gamma_x, Gamma_e, y, covariance: bool | None = None) -> PosteriorResult:
    """Posterior mean and covariance of the linear Gaussian model ``y = J x + e``.

    Works in the 2m-dimensional data space and never inverts ``Gamma_x``, so a
    truncated (semidefinite) prior is fine. The dense covariance is formed
    only when ``covariance`` is true or, by default, when ``n <= 4000``;
    otherwise only the variances are returned.
    """
    return _posterior(J, Gamma_x, Gamma_e, y, covariance)


def projected_posterior(P, J, Gamma_x, Gamma_e, y, covariance: bool | None = None) -> PosteriorResult:
    """Posterior of the projected model ``P y = P J x + P e``."""
    Pm = P.P if hasattr(P, "P") else np.asarray(P, dtype=float)
    res = _posterior(Pm @ np.asarray(J, dtype=float), Gamma_x, Gamma_e, Pm @ np.asarray(y, dtype=float), covariance)
    res.diagnostics["projection_rank"] = int(P.rank) if hasattr(P, "rank") else int(np.round(np.trace(Pm)))
    return res


def covariance_gap(Gamma_post, Gamma_post_P) -> float:
    """Smallest eigenvalue of ``Gamma_post_P - Gamma_post``."""
    A = np.asarray(Gamma_post, dtype=float)
    B = np.asarray(Gamma_post_P, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("covariance_gap needs two square matrices of one shape")
    D = B - A
    return float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])


def l2_error(estimate, truth, mask=None) -> float:
    """Relative L2 error ``|est - truth| / |truth|`` over ``mask`` (absolute when truth is 0)."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ContractError("estimate and truth shapes differ")
    if mask is not None:
        mask = np.asarray(mask)
        est, tru = est[mask], tru[mask]
    num = np.linalg.norm(est - tru)
    den = np.linalg.norm(tru)
    return float(num / den) if den > 0 else float(num)
