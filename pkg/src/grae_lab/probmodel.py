"""Prior, structured Gaussian posteriors and observation models."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics
from .errors import ConfigError, DomainError, LengthMismatch

DIAG_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CovarianceStructure:
    """``diagonal``, ``block`` (with block size) or ``full``."""

    kind: str = "diagonal"
    block: int = 1

    def __post_init__(self):
        if self.kind not in ("diagonal", "block", "full"):
            raise ConfigError(f"unknown covariance structure {self.kind!r}")
        if self.kind == "block" and self.block < 1:
            raise ConfigError("block size must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "CovarianceStructure":
        text = text.strip()
        if text in ("diagonal", "diag"):
            return cls("diagonal", 1)
        if text == "full":
            return cls("full", 0)
        if text.startswith("block:"):
            try:
                b = int(text.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad block size in {text!r}") from None
            return cls("block", b)
        raise ConfigError(f"unknown covariance structure {text!r}")

    def __str__(self):
        return f"block:{self.block}" if self.kind == "block" else self.kind

    def block_size(self, d: int) -> int:
        if self.kind == "diagonal":
            return 1
        if self.kind == "full":
            return d
        return min(self.block, d)

    def blocks(self, d: int) -> list[tuple[int, int]]:
        """(start, size) pairs; the last block may be smaller."""
        b = self.block_size(d)
        return [(s, min(b, d - s)) for s in range(0, d, b)]

    def mask(self, d: int) -> np.ndarray:
        m = np.zeros((d, d), dtype=bool)
        for s, size in self.blocks(d):
            m[s:s + size, s:s + size] = True
        return m

    def n_free(self, d: int) -> int:
        return sum(size * (size + 1) // 2 for _, size in self.blocks(d))


@lru_cache(maxsize=64)
def _factor_layout(structure: CovarianceStructure, d: int):
    # raw ordering: block by block, lower triangle row-major
    rows, cols = [], []
    for s, size in structure.blocks(d):
        for i in range(size):
            for j in range(i + 1):
                rows.append(s + i)
                cols.append(s + j)
    rows, cols = np.array(rows), np.array(cols)
    return rows, cols, rows == cols


def assemble_covariance(raw, structure: CovarianceStructure, d: int) -> np.ndarray:
    """Map unconstrained entries to a structured lower-triangular factor.

    Accepts ``raw`` of shape ``(P,)`` or ``(n, P)``; returns ``(d, d)`` or
    ``(n, d, d)``.
    """
    raw = np.asarray(raw, dtype=float)
    rows, cols, diag = _factor_layout(structure, d)
    if raw.shape[-1] != rows.size:
        raise LengthMismatch(f"expected {rows.size} raw entries for {structure} with d={d}, got {raw.shape[-1]}")
    vals = np.where(diag, np.maximum(np.exp(np.where(diag, raw, 0.0)), DIAG_FLOOR), raw)
    C = np.zeros(raw.shape[:-1] + (d, d))
    C[..., rows, cols] = vals
    return C


def assemble_covariance_backward(raw, structure: CovarianceStructure, d: int, grad_factor) -> np.ndarray:
    """Pull a gradient w.r.t. the factor back to the raw entries."""
    raw = np.asarray(raw, dtype=float)
    rows, cols, diag = _factor_layout(structure, d)
    g = np.asarray(grad_factor)[..., rows, cols]
    e = np.exp(np.where(diag, raw, 0.0))
    scale = np.where(diag, np.where(e > DIAG_FLOOR, e, 0.0), 1.0)
    return g * scale


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    factor: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T


def kl_std_normal(mu, Sigma) -> float:
    """KL( N(mu, Sigma) || N(0, I) )."""
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    d = mu.shape[0]
    return 0.5 * float(mu @ mu + np.trace(Sigma) - numerics.log_det_pd(Sigma) - d)


def kl_from_factor(mu, F):
    """Batched KL for ``Sigma = F F^T`` with square (not necessarily triangular) F."""
    mu = np.asarray(mu, dtype=float)
    F = np.asarray(F, dtype=float)
    d = mu.shape[-1]
    _, logabsdet = np.linalg.slogdet(F)
    return 0.5 * (np.sum(mu * mu, axis=-1) + np.sum(F * F, axis=(-2, -1)) - 2.0 * logabsdet - d)


def sample(post: GaussianPosterior, n: int, rng) -> np.ndarray:
    """Reparameterized draws ``mu + C eps``, shape ``(n, d)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    eps = rng.standard_normal((n, post.mean.shape[0]))
    return post.mean + eps @ np.asarray(post.factor).T


@dataclass(frozen=True)
class ObservationModel:
    kind: str = "gaussian_unit"
    eps_p: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("gaussian_unit", "bernoulli"):
            raise ConfigError(f"unknown observation model {self.kind!r}")

    def _prep(self, x, g):
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        if self.kind == "bernoulli":
            if not np.all((x == 0.0) | (x == 1.0)):
                raise DomainError("bernoulli observations must be 0 or 1")
            g = np.clip(g, self.eps_p, 1.0 - self.eps_p)
        return x, g

    def loglik(self, x, g):
        x, g = self._prep(x, g)
        if self.kind == "gaussian_unit":
            r = x - g
            return -0.5 * np.sum(r * r, axis=-1) - 0.5 * x.shape[-1] * LOG_2PI
        return np.sum(x * np.log(g) + (1.0 - x) * np.log1p(-g), axis=-1)

    def grad(self, x, g):
        x, g = self._prep(x, g)
        if self.kind == "gaussian_unit":
            return x - g
        return x / g - (1.0 - x) / (1.0 - g)

    def hessian_diag(self, x, g):
        x, g = self._prep(x, g)
        if self.kind == "gaussian_unit":
            return -np.ones(np.broadcast(x, g).shape)
        return -1.0 / (1.0 - x - g) ** 2


def obs_loglik(m: ObservationModel, x, g):
    return m.loglik(x, g)


def obs_grad(m: ObservationModel, x, g):
    return m.grad(x, g)


def obs_hessian_diag(m: ObservationModel, x, g):
    return m.hessian_diag(x, g)
