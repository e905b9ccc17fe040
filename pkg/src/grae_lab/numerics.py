"""Dense small-matrix linear algebra.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the positive-definiteness checks the objectives rely on, plus a
one-sided Jacobi SVD for the small matrices used in Procrustes alignment.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConvergenceFailure, DimensionMismatch, NotPositiveDefinite

SYM_TOL = 1e-12
PIVOT_REL_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class CholeskyFactor:
    L: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return self.L @ self.L.T


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _as_square(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return A


def _symmetrized(A) -> np.ndarray:
    A = _as_square(A)
    scale = max(1.0, float(np.max(np.abs(A))) if A.size else 1.0)
    if np.max(np.abs(A - A.T), initial=0.0) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (A + A.T)


def cholesky(A) -> CholeskyFactor:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises NotPositiveDefinite when a squared pivot falls below
    ``1e-12 * trace(A)``.
    """
    A = _symmetrized(A)
    n = A.shape[0]
    tol = PIVOT_REL_TOL * max(abs(np.trace(A)), np.finfo(float).tiny)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("matrix is not positive definite") from exc
    if n and np.min(np.diag(L)) ** 2 <= tol:
        raise NotPositiveDefinite("pivot below tolerance")
    return CholeskyFactor(L)


def log_det_pd(A) -> float:
    L = cholesky(A).L
    return float(2.0 * np.sum(np.log(np.diag(L))))


def invert_pd(A) -> np.ndarray:
    L = cholesky(A).L
    n = L.shape[0]
    Linv = np.linalg.solve(L, np.eye(n))
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


def _complete_orthonormal(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    # replace columns flagged ~good with unit vectors orthogonal to the rest
    m = U.shape[0]
    out = U.copy()
    basis = [out[:, j] for j in range(out.shape[1]) if good[j]]
    candidates = iter(np.eye(m))
    for j in range(out.shape[1]):
        if good[j]:
            continue
        for e in candidates:
            v = e.copy()
            for b in basis:
                v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                out[:, j] = v
                basis.append(v)
                break
    return out


def svd_small(A, max_sweeps: int = JACOBI_MAX_SWEEPS) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns U (m x k), S (k,), V (n x k) with k = min(m, n) and S sorted in
    non-increasing order.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionMismatch("svd_small expects a 2-D matrix")
    m, n = A.shape
    if m < n:
        r = svd_small(A.T, max_sweeps)
        return SvdResult(r.V, r.S, r.U)

    W = A.copy()
    V = np.eye(n)
    eps = np.finfo(float).eps
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = W[:, p] @ W[:, p]
                beta = W[:, q] @ W[:, q]
                gamma = W[:, p] @ W[:, q]
                if abs(gamma) <= eps * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wp, wq = W[:, p].copy(), W[:, q].copy()
                W[:, p] = c * wp - s * wq
                W[:, q] = s * wp + c * wq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceFailure(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    S = np.linalg.norm(W, axis=0)
    order = np.argsort(-S, kind="stable")
    S, W, V = S[order], W[:, order], V[:, order]
    smax = S[0] if n else 0.0
    good = S > max(smax, 1.0) * 1e-14
    U = np.zeros((m, n))
    U[:, good] = W[:, good] / S[good]
    if not np.all(good):
        U = _complete_orthonormal(U, good)
    return SvdResult(U, S, V)


def write_matrix_csv(path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines = [",".join(format(v, ".17g") for v in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
