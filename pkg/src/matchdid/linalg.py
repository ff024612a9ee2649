"""Small dense linear-algebra helpers with explicit conditioning checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import RankDeficient, SingularCovariance, SingularStructure

RCOND_TOL = 1e-12


def as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and cols is not None and m.size == rows * cols:
        m = m.reshape(rows, cols)
    return m


def solve_spd(a: np.ndarray, b: np.ndarray, block: str = "matrix") -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    Raises SingularCovariance when the reciprocal condition number, measured
    from the extreme eigenvalues, falls below ``RCOND_TOL``.
    """
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((0,) + np.shape(b)[1:])
    eig = np.linalg.eigvalsh(a)
    top = eig[-1]
    if top <= 0 or eig[0] / top < RCOND_TOL:
        raise SingularCovariance(block, f"rcond={eig[0] / top if top > 0 else 0.0:.3g}")
    factor = sla.cho_factor(a, lower=True)
    return sla.cho_solve(factor, b)


def mvn_conditional_mean(mean, cov, observed_idx, observed_vals) -> np.ndarray:
    """Conditional mean of the unobserved block of a multivariate normal.

    E(U | O = o) = mu_U + Cov(U, O) Cov(O, O)^{-1} (o - mu_O)
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mean.shape[0]
    obs = np.asarray(observed_idx, dtype=int)
    if obs.ndim != 1 or np.any(obs < 0) or np.any(obs >= n) or len(set(obs.tolist())) != obs.size:
        raise IndexError("observed indices must be distinct and within range")
    hidden = np.setdiff1d(np.arange(n), obs)
    vals = np.asarray(observed_vals, dtype=float)
    v11 = cov[np.ix_(obs, obs)]
    v21 = cov[np.ix_(hidden, obs)]
    w = solve_spd(v11, vals - mean[obs], block="observed")
    return mean[hidden] + v21 @ w


def structured_inverse_q(x: float, y: float, dim: int, tol: float = 1e-12) -> np.ndarray:
    """Closed-form inverse of the compound-symmetric matrix with diagonal ``x``
    and off-diagonal ``y``.

    diagonal:     (x + (n - 2) y) / ((x - y)(x + (n - 1) y))
    off-diagonal: -y / ((x - y)(x + (n - 1) y))
    """
    if dim < 1:
        raise ValueError("dim must be at least 1")
    scale = max(abs(x), abs(y), 1.0)
    if abs(x - y) <= tol * scale or abs(x + (dim - 1) * y) <= tol * scale:
        raise SingularStructure(f"compound-symmetric matrix with x={x}, y={y}, dim={dim} is singular")
    denom = (x - y) * (x + (dim - 1) * y)
    diag = (x + (dim - 2) * y) / denom
    off = -y / denom
    out = np.full((dim, dim), off)
    np.fill_diagonal(out, diag)
    return out


def block_inverse(a, b, c, d, block: str = "block") -> np.ndarray:
    """Invert [[A, B], [C, D]] through the Schur complement of ``A``.

    A^{-1} + A^{-1} B S^{-1} C A^{-1}   -A^{-1} B S^{-1}
    -S^{-1} C A^{-1}                      S^{-1}
    with S = D - C A^{-1} B.
    """
    a, b, c, d = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (a, b, c, d))
    a_inv = _checked_inverse(a, f"{block}:A")
    schur = d - c @ a_inv @ b
    s_inv = _checked_inverse(schur, f"{block}:schur")
    top_left = a_inv + a_inv @ b @ s_inv @ c @ a_inv
    top_right = -a_inv @ b @ s_inv
    bottom_left = -s_inv @ c @ a_inv
    return np.block([[top_left, top_right], [bottom_left, s_inv]])


def _checked_inverse(m: np.ndarray, block: str) -> np.ndarray:
    if m.size == 0:
        return m.copy()
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0 or s[-1] / s[0] < RCOND_TOL:
        raise SingularCovariance(block)
    lu = sla.lu_factor(m)
    return sla.lu_solve(lu, np.eye(m.shape[0]))


@dataclass(frozen=True)
class OLSResult:
    coef: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray


def ols(design, response, rank_tol: float = 1e-10) -> OLSResult:
    """Least squares through a thin QR factorization.

    ``response`` may be a vector or a matrix with one column per outcome; all
    columns share the same factorization.
    """
    xmat = np.asarray(design, dtype=float)
    if xmat.ndim == 1:
        xmat = xmat[:, None]
    yarr = np.asarray(response, dtype=float)
    n, k = xmat.shape
    if yarr.shape[0] != n:
        raise ValueError("design and response have different row counts")
    if n < k:
        raise RankDeficient(f"{n} rows cannot identify {k} coefficients")
    q, r = np.linalg.qr(xmat, mode="reduced")
    diag = np.abs(np.diag(r))
    if k and (diag.max() == 0 or diag.min() <= rank_tol * diag.max()):
        raise RankDeficient("design matrix does not have full column rank")
    coef = sla.solve_triangular(r, q.T @ yarr, lower=False)
    fitted = xmat @ coef
    return OLSResult(coef=coef, residuals=yarr - fitted, fitted=fitted)
