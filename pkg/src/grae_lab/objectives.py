"""The beta-VAE objective, its deterministic approximations and diagnostics.

Conventions: ``beta_vae_mc``, ``taylor_objective`` and ``profiled_objective``
are maximization values (log-likelihood scale, normalizer included).
``grae`` and ``grae_approx`` are minimization values without the Gaussian
normalizer, so for Gaussian observations
``grae + profiled_objective + (D/2) log 2pi == 0``.

Encoders may be passed as an ``MlpNetwork`` or any callable ``x -> h(x)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics
from .errors import DimensionMismatch, ZeroColumn
from .network import MlpNetwork, forward, input_jacobian, jvp
from .probmodel import LOG_2PI, ObservationModel, kl_std_normal

FD_HESSIAN_STEP = 1e-4


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 1.0
    mc_samples: int = 64
    hessian_mode: str = "jacobian_form"
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.k < 1 or self.mc_samples < 1:
            raise ValueError("k and mc_samples must be >= 1")
        if self.hessian_mode not in ("jacobian_form", "finite_difference"):
            raise ValueError(f"unknown hessian mode {self.hessian_mode!r}")


@dataclass
class ObjectiveReport:
    beta_vae_mc: float
    taylor_hessian: float
    taylor_jacobian_form: float
    profiled: float
    grae: float
    grae_approx: float
    gap: float
    averaged: bool = True

    def as_dict(self):
        return asdict(self)


def _encode(encoder, x):
    if isinstance(encoder, MlpNetwork):
        return forward(encoder, x)[0]
    return np.asarray(encoder(x), dtype=float)


def _decode(decoder, z):
    return forward(decoder, z)[0]


def mc_loglik_samples(encoder, factor, decoder, obs: ObservationModel, x, n: int, rng) -> np.ndarray:
    """Per-draw reconstruction log-likelihoods under reparameterized draws."""
    h = _encode(encoder, x)
    eps = rng.standard_normal((n, h.shape[0]))
    z = h + eps @ np.asarray(factor, dtype=float).T
    return obs.loglik(x, _decode(decoder, z))


def beta_vae_mc(encoder, factor, decoder, obs: ObservationModel, x, config: ObjectiveConfig, rng) -> float:
    h = _encode(encoder, x)
    factor = np.asarray(factor, dtype=float)
    ll = mc_loglik_samples(encoder, factor, decoder, obs, x, config.mc_samples, rng)
    return float(np.mean(ll)) - config.beta * kl_std_normal(h, factor @ factor.T)


def hessian_fx(decoder: MlpNetwork, obs: ObservationModel, x, z, mode: str = "jacobian_form", step: float = FD_HESSIAN_STEP):
    """Hessian of ``log p(x | z)`` in ``z``.

    ``jacobian_form`` drops the second-derivative-of-decoder term;
    ``finite_difference`` is a central second difference of the
    log-likelihood itself and serves as the oracle.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (decoder.in_dim,):
        raise DimensionMismatch("z does not match decoder input")
    if mode == "jacobian_form":
        J = input_jacobian(decoder, z)
        hd = obs.hessian_diag(x, _decode(decoder, z))
        H = J.T @ (hd[:, None] * J)
        return 0.5 * (H + H.T)
    if mode != "finite_difference":
        raise ValueError(f"unknown hessian mode {mode!r}")
    d = z.shape[0]
    E = np.eye(d) * step
    pts = []
    for i in range(d):
        for j in range(d):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                pts.append(z + si * E[i] + sj * E[j])
    f = obs.loglik(x, _decode(decoder, np.array(pts))).reshape(d, d, 4)
    H = (f[..., 0] - f[..., 1] - f[..., 2] + f[..., 3]) / (4.0 * step * step)
    return 0.5 * (H + H.T)


def taylor_objective(h, Sigma, decoder, obs: ObservationModel, x, beta: float, mode: str = "jacobian_form") -> float:
    h = np.asarray(h, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    H = hessian_fx(decoder, obs, x, h, mode)
    ll = float(obs.loglik(x, _decode(decoder, h)))
    return ll + 0.5 * float(np.sum(H * Sigma)) - beta * kl_std_normal(h, Sigma)


def optimal_covariance(decoder, obs: ObservationModel, x, z, beta: float, mode: str = "jacobian_form") -> np.ndarray:
    if not beta > 0:
        raise ValueError("beta must be positive")
    H = hessian_fx(decoder, obs, x, z, mode)
    return numerics.invert_pd(np.eye(H.shape[0]) - H / beta)


def profiled_objective(h, decoder, obs: ObservationModel, x, beta: float, mode: str = "jacobian_form") -> float:
    if not beta > 0:
        raise ValueError("beta must be positive")
    h = np.asarray(h, dtype=float)
    H = hessian_fx(decoder, obs, x, h, mode)
    ll = float(obs.loglik(x, _decode(decoder, h)))
    return ll - 0.5 * beta * float(h @ h) - 0.5 * beta * numerics.log_det_pd(np.eye(h.shape[0]) - H / beta)


def log_det_regularizer(J, beta: float) -> float:
    """``log |I + J^T J / beta|``."""
    J = np.asarray(J, dtype=float)
    return numerics.log_det_pd(np.eye(J.shape[1]) + J.T @ J / beta)


def hadamard_bound(J, beta: float) -> float:
    """Column-wise upper bound ``sum_i log(1 + ||J_:i||^2 / beta)``."""
    J = np.asarray(J, dtype=float)
    return float(np.sum(np.log1p(np.sum(J * J, axis=0) / beta)))


def grae(encoder, decoder, x, beta: float) -> float:
    x = np.asarray(x, dtype=float)
    h = _encode(encoder, x)
    r = x - _decode(decoder, h)
    J = input_jacobian(decoder, h)
    return 0.5 * float(r @ r) + 0.5 * beta * float(h @ h) + 0.5 * beta * log_det_regularizer(J, beta)


def sampled_column_term(column_sqnorms, beta: float, d: int) -> float:
    """Importance-weighted estimate of the Hadamard bound with uniform p_c."""
    vals = np.log1p(np.asarray(column_sqnorms, dtype=float) / beta)
    return float(d * np.mean(vals))


def grae_approx(encoder, decoder, x, beta: float, k: int, rng, obs: ObservationModel | None = None, columns=None) -> float:
    """GRAE with the log-det replaced by a sampled Hadamard bound.

    Columns are drawn uniformly (or taken from ``columns``) and obtained by
    tangent propagation. For non-Gaussian ``obs`` the columns are weighted by
    ``sqrt(-H_p)`` and the reconstruction term is ``-log p(x | g(h(x)))``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=float)
    h = _encode(encoder, x)
    d = h.shape[0]
    g = _decode(decoder, h)
    if columns is None:
        columns = rng.integers(0, d, size=k)
    columns = np.asarray(columns)
    tans, _ = jvp(decoder, np.broadcast_to(h, (columns.size, d)), np.eye(d)[columns])
    if obs is None or obs.kind == "gaussian_unit":
        recon = 0.5 * float(np.sum((x - g) ** 2))
        w = 1.0
    else:
        recon = -float(obs.loglik(x, g))
        w = -obs.hessian_diag(x, g)
    sq = np.sum(w * tans * tans, axis=-1)
    reg = sampled_column_term(sq, beta, d)
    return recon + 0.5 * beta * float(h @ h) + 0.5 * beta * reg


def taylor_gap(J, Sigma, beta: float) -> float:
    """``(beta/2) [tr(M S) - log|M S| - d]`` with ``M = I + J^T J / beta``."""
    J = np.asarray(J, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    d = J.shape[1]
    M = np.eye(d) + J.T @ J / beta
    val = float(np.sum(M * Sigma)) - numerics.log_det_pd(M) - numerics.log_det_pd(Sigma) - d
    return 0.5 * beta * val


def _column_cosines_sq(J):
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[1] < 2:
        raise DimensionMismatch("need at least two columns")
    norms = np.sum(J * J, axis=0)
    if np.any(norms == 0.0):
        raise ZeroColumn("Jacobian has a zero column")
    G = J.T @ J
    return G * G / np.outer(norms, norms)


def orthogonality_penalty(J, rng=None, mode: str = "full", pair=None) -> float:
    C = _column_cosines_sq(J)
    d = C.shape[0]
    if mode == "full":
        return float(np.sum(np.triu(C, 1)))
    if mode != "sampled_pair":
        raise ValueError(f"unknown mode {mode!r}")
    if pair is None:
        i, j = rng.choice(d, size=2, replace=False)
    else:
        i, j = pair
    n_pairs = d * (d - 1) // 2
    return float(n_pairs * C[i, j])


def frobenius_reg(J, obs_hessian_diag_values) -> float:
    """First-order regularizer ``1/2 tr(J^T diag(-H) J)``."""
    J = np.asarray(J, dtype=float)
    w = -np.asarray(obs_hessian_diag_values, dtype=float)
    return 0.5 * float(np.sum(w[:, None] * J * J))


def metric_residual(J, Sigma, beta: float) -> float:
    J = np.asarray(J, dtype=float)
    G = J.T @ J
    d = G.shape[0]
    R = G - beta * (numerics.invert_pd(Sigma) - np.eye(d))
    nG = np.linalg.norm(G)
    return float(np.linalg.norm(R) / (1.0 + nG))


def off_block_mass(M, b: int) -> float:
    """Fraction of squared mass outside the diagonal blocks of size ``b``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch("off_block_mass needs a square matrix")
    n = M.shape[0]
    b = max(1, min(b, n))
    blk = np.arange(n) // b
    inside = blk[:, None] == blk[None, :]
    sq = M * M
    total = float(np.sum(sq))
    if total == 0.0:
        return 0.0
    return float(np.sum(sq[~inside]) / total)


def gaussian_normalizer(D: int) -> float:
    return 0.5 * D * LOG_2PI
