"""Identifiability tools: prior-preserving mixing maps, PPCA, Procrustes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import numerics
from .errors import DegenerateInput, DimensionMismatch, DomainError

CDF_CLAMP = 1e-15


def rotation(theta_deg: float) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


# Each prior maps to the standard normal through its cdf: lower-tail and
# upper-tail probabilities are kept separate so the chain stays accurate far
# from the median.

def _normal_from_tails(lower, upper, use_lower):
    tail = np.where(use_lower, lower, upper)
    if np.any(tail < CDF_CLAMP) or np.any(~np.isfinite(tail)):
        raise DomainError("cdf evaluation left (0, 1) beyond clamp")
    n = ndtri(tail)
    return np.where(use_lower, n, -n)


def _tails_of_normal(n):
    return ndtr(n), ndtr(-n)


class GaussianMarginal:
    name = "gaussian"

    def cdf(self, z):
        return ndtr(z)

    def logpdf(self, z):
        return -0.5 * z * z - 0.5 * np.log(2 * np.pi)


class LaplaceMarginal:
    """Unit-scale Laplace density ``exp(-|z|)/2``."""

    name = "laplace"

    def to_normal(self, z):
        z = np.asarray(z, dtype=float)
        lower = 0.5 * np.exp(-np.abs(z))  # tail mass beyond |z|
        neg = z <= 0
        return _normal_from_tails(lower, lower, neg)

    def from_normal(self, n):
        n = np.asarray(n, dtype=float)
        lo, up = _tails_of_normal(n)
        neg = n <= 0
        tail = np.where(neg, lo, up)
        if np.any(tail < CDF_CLAMP):
            raise DomainError("cdf evaluation left (0, 1) beyond clamp")
        mag = -np.log(2.0 * tail)
        return np.where(neg, -mag, mag)

    def cdf(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(z <= 0, 0.5 * np.exp(np.minimum(z, 0)), 1 - 0.5 * np.exp(-np.maximum(z, 0)))

    def logpdf(self, z):
        return -np.abs(z) - np.log(2.0)


MARGINALS = {"gaussian": GaussianMarginal, "laplace": LaplaceMarginal}


@dataclass
class MixingTransform:
    """``r = F^{-1} o psi o U o psi^{-1} o F`` for a prior left invariant by r.

    ``prior`` is ``"gaussian"``, ``"laplace"`` (factorized, i.i.d. marginals)
    or ``"correlated_gaussian"`` (bivariate, correlation ``rho``), in which
    case ``F`` is the chain of conditional cdfs.
    """

    U: np.ndarray
    prior: str = "gaussian"
    rho: float = 0.0

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        d = self.U.shape[0]
        if self.U.shape != (d, d) or np.linalg.norm(self.U.T @ self.U - np.eye(d)) > 1e-10:
            raise ValueError("U must be orthonormal")
        if self.prior == "correlated_gaussian":
            if d != 2 or not -1 < self.rho < 1:
                raise ValueError("correlated prior needs d=2 and |rho| < 1")
        elif self.prior not in MARGINALS:
            raise ValueError(f"unknown prior {self.prior!r}")

    def _to_normal(self, z):
        if self.prior == "correlated_gaussian":
            # u1 = Phi(z1), u2 = Phi((z2 - rho z1) / sqrt(1 - rho^2))
            s = np.sqrt(1.0 - self.rho ** 2)
            cond = (z[..., 1] - self.rho * z[..., 0]) / s
            n0 = _normal_from_tails(*_tails_of_normal(z[..., 0]), z[..., 0] <= 0)
            n1 = _normal_from_tails(*_tails_of_normal(cond), cond <= 0)
            return np.stack([n0, n1], axis=-1)
        if self.prior == "gaussian":
            return _normal_from_tails(*_tails_of_normal(z), z <= 0)
        return MARGINALS[self.prior]().to_normal(z)

    def _from_normal(self, n):
        if self.prior == "correlated_gaussian":
            s = np.sqrt(1.0 - self.rho ** 2)
            z0 = _normal_from_tails(*_tails_of_normal(n[..., 0]), n[..., 0] <= 0)
            cond = _normal_from_tails(*_tails_of_normal(n[..., 1]), n[..., 1] <= 0)
            return np.stack([z0, self.rho * z0 + s * cond], axis=-1)
        if self.prior == "gaussian":
            return _normal_from_tails(*_tails_of_normal(n), n <= 0)
        return MARGINALS[self.prior]().from_normal(n)

    def logpdf(self, z):
        z = np.asarray(z, dtype=float)
        if self.prior == "correlated_gaussian":
            s2 = 1.0 - self.rho ** 2
            q = (z[..., 0] ** 2 - 2 * self.rho * z[..., 0] * z[..., 1] + z[..., 1] ** 2) / s2
            return -0.5 * q - np.log(2 * np.pi) - 0.5 * np.log(s2)
        return np.sum(MARGINALS[self.prior]().logpdf(z), axis=-1)

    def sample_prior(self, n: int, rng) -> np.ndarray:
        d = self.U.shape[0]
        if self.prior == "laplace":
            return rng.laplace(size=(n, d))
        e = rng.standard_normal((n, d))
        if self.prior == "correlated_gaussian":
            e[:, 1] = self.rho * e[:, 0] + np.sqrt(1 - self.rho ** 2) * e[:, 1]
        return e


def apply_mixing(t: MixingTransform, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != t.U.shape[0]:
        raise DimensionMismatch("z does not match transform dimension")
    n = t._to_normal(z)
    return t._from_normal(n @ t.U.T)


def mixing_jacobian(t: MixingTransform, z, step: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    d = z.shape[0]
    E = np.eye(d) * step
    pts = np.concatenate([z + E, z - E])
    out = apply_mixing(t, pts)
    return ((out[:d] - out[d:]) / (2 * step)).T


def mixing_jacobian_absdet(t: MixingTransform, z, step: float = 1e-6) -> float:
    """|det J_r(z)| by central differences."""
    return float(abs(np.linalg.det(mixing_jacobian(t, z, step))))


@dataclass
class PpcaModel:
    A: np.ndarray
    sigma: float

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def ppca_marginal(m: PpcaModel) -> np.ndarray:
    D = m.A.shape[0]
    return m.A @ m.A.T + m.sigma ** 2 * np.eye(D)


def ppca_posterior(m: PpcaModel, x):
    d = m.A.shape[1]
    cov = numerics.invert_pd(np.eye(d) + m.A.T @ m.A / m.sigma ** 2)
    mean = cov @ m.A.T @ np.asarray(x, dtype=float) / m.sigma ** 2
    return mean, cov


def ppca_elbo_optimum(m: PpcaModel, X) -> float:
    """Mean exact log marginal likelihood, the ELBO optimum at beta = 1."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    C = ppca_marginal(m)
    L = numerics.cholesky(C).L
    sol = np.linalg.solve(L, X.T)
    D = C.shape[0]
    return float(np.mean(-0.5 * np.sum(sol * sol, axis=0)) - np.sum(np.log(np.diag(L))) - 0.5 * D * np.log(2 * np.pi))


@dataclass
class AlignmentResult:
    """``O = rotation(angle) @ P @ diag(reflection)``."""

    O: np.ndarray
    permutation: tuple[int, int]
    reflection: tuple[int, int]
    angle: float
    residual: float

    def recompose(self) -> np.ndarray:
        P = np.eye(2)[list(self.permutation)].T
        return rotation(self.angle) @ P @ np.diag(self.reflection)


def _wrap_angle(R) -> float:
    return float(np.degrees(np.arctan2(R[1, 0], R[0, 0])))


def decompose_orthogonal_2d(O) -> tuple[tuple[int, int], tuple[int, int], float]:
    """Split a 2x2 orthogonal matrix into rotation, axis swap and signs.

    Of the eight permutation/sign candidates exactly one leaves a rotation
    with angle in (-45, 45]; an exact -45 is reported as +45.
    """
    best = None
    for perm in ((0, 1), (1, 0)):
        P = np.eye(2)[list(perm)].T
        for sx in (1, -1):
            for sy in (1, -1):
                S = np.diag([sx, sy])
                R = O @ S @ P.T
                if np.linalg.det(R) < 0:
                    continue
                ang = _wrap_angle(R)
                if -45.0 + 1e-9 < ang <= 45.0 + 1e-9:
                    cand = (min(ang, 45.0), perm, (sx, sy))
                    if best is None or cand[0] > best[0]:
                        best = cand
    if best is None:
        raise DegenerateInput("could not factor orthogonal matrix")
    ang, perm, sign = best
    return perm, sign, ang


def procrustes_align(Z, M) -> AlignmentResult:
    """Solve ``min_O ||Z - O M||_F`` over orthogonal 2x2 ``O``.

    ``Z`` and ``M`` are ``(2, n)``.
    """
    Z = np.asarray(Z, dtype=float)
    M = np.asarray(M, dtype=float)
    if Z.shape != M.shape or Z.shape[0] != 2 or Z.shape[1] < 2:
        raise DimensionMismatch("Z and M must both be 2 x n with n >= 2")
    svd = numerics.svd_small(Z @ M.T)
    if svd.S[0] == 0.0 or svd.S[-1] < 1e-10 * svd.S[0]:
        raise DegenerateInput("Z M^T is rank deficient")
    O = svd.U @ svd.V.T
    perm, sign, ang = decompose_orthogonal_2d(O)
    res = float(np.linalg.norm(Z - O @ M))
    return AlignmentResult(O, perm, sign, ang, res)
