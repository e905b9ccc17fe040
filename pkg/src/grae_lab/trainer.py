"""Optimizers, the step learning-rate schedule, training loops, checkpoints.

Three objectives are supported:

* ``beta_vae``: single-sample reparameterized beta-VAE. The posterior
  covariance is either ``amortized`` (Cholesky head on the encoder) or
  ``shared`` (one covariance for all inputs).
* ``grae_approx``: deterministic autoencoder with the sampled-column
  Hadamard bound on the Jacobian log-det (Gaussian observations).
* ``unamortized_vi``: per-example means and covariances, no encoder.

With ``rotation_randomization`` the encoder output is mixed by a fixed random
rotation and shared / per-example covariances are parameterized as
``O D D^T O^T``. For a diagonal structure in those modes only the diagonal of
that matrix enters the objective.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .errors import (
    ConfigError,
    CorruptDocument,
    IoError,
    NonFiniteGradient,
    NonFiniteObjective,
    VersionMismatch,
)
from .network import MlpNetwork, backward, forward, init_mlp, jvp, jvp_backward, net_from_doc, net_to_doc
from .probmodel import (
    CovarianceStructure,
    ObservationModel,
    assemble_covariance,
    assemble_covariance_backward,
    kl_from_factor,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
OBJECTIVES = ("beta_vae", "grae_approx", "unamortized_vi")


@dataclass(frozen=True)
class LrSchedule:
    n: int
    initial: float = 0.1
    factor: float = 10.0
    floor: float = 1e-5

    @property
    def total_iterations(self) -> int:
        steps = round(math.log(self.initial / self.floor, self.factor))
        return (steps + 1) * self.n


def schedule_lr(s: LrSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return max(s.initial * s.factor ** (-(iteration // s.n)), s.floor)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "beta_vae"
    beta: float = 1.0
    iterations: int = 1000
    batch_size: int = 0
    seed: int = 0
    structure: str = "diagonal"
    cov_mode: str = "amortized"
    rotation_randomization: bool = False
    optimizer: str = "adam"
    lr: float = 1e-3
    schedule_n: int = 0
    latent_dim: int = 2
    encoder_hidden: tuple = ()
    decoder_hidden: tuple = ()
    hidden_activation: str = "elu"
    output_activation: str = "identity"
    obs: str = "gaussian_unit"
    k: int = 1
    log_every: int = 10

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.cov_mode not in ("amortized", "shared"):
            raise ConfigError(f"unknown covariance mode {self.cov_mode!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        CovarianceStructure.parse(self.structure)
        ObservationModel(self.obs)
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(int(h) for h in self.decoder_hidden))

    @property
    def covariance_structure(self) -> CovarianceStructure:
        return CovarianceStructure.parse(self.structure)

    def lr_at(self, iteration: int) -> float:
        if self.schedule_n > 0:
            return schedule_lr(LrSchedule(self.schedule_n), iteration)
        return self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def random_rotation(d: int, rng) -> np.ndarray:
    """Haar-random rotation (determinant +1)."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


@dataclass
class VaeModel:
    decoder: MlpNetwork
    latent_dim: int
    structure: CovarianceStructure
    mode: str  # "amortized", "shared", "unamortized" or "deterministic"
    obs: ObservationModel = field(default_factory=ObservationModel)
    encoder: MlpNetwork | None = None
    enc_rotation: np.ndarray | None = None
    cov_rotation: np.ndarray | None = None
    cov_param: np.ndarray | None = None  # shared: (d, d); unamortized: (N, d, d)
    local_mean: np.ndarray | None = None  # unamortized: (N, d)

    def __post_init__(self):
        d = self.latent_dim
        if self.enc_rotation is None:
            self.enc_rotation = np.eye(d)
        if self.cov_rotation is None:
            self.cov_rotation = np.eye(d)

    @property
    def mean_field(self) -> bool:
        return self.mode in ("shared", "unamortized") and self.structure.kind == "diagonal"

    # -- parameters ------------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        p = {}
        if self.encoder is not None:
            for i, layer in enumerate(self.encoder.layers):
                p[f"enc.W{i}"], p[f"enc.b{i}"] = layer.W, layer.b
        for i, layer in enumerate(self.decoder.layers):
            p[f"dec.W{i}"], p[f"dec.b{i}"] = layer.W, layer.b
        if self.cov_param is not None:
            p["cov_param"] = self.cov_param
        if self.local_mean is not None:
            p["local_mean"] = self.local_mean
        return p

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        if self.encoder is not None:
            for i, layer in enumerate(self.encoder.layers):
                layer.W, layer.b = p[f"enc.W{i}"], p[f"enc.b{i}"]
        for i, layer in enumerate(self.decoder.layers):
            layer.W, layer.b = p[f"dec.W{i}"], p[f"dec.b{i}"]
        if self.cov_param is not None:
            self.cov_param = p["cov_param"]
        if self.local_mean is not None:
            self.local_mean = p["local_mean"]

    def copy(self) -> "VaeModel":
        return VaeModel(
            decoder=self.decoder.copy(),
            latent_dim=self.latent_dim,
            structure=self.structure,
            mode=self.mode,
            obs=self.obs,
            encoder=None if self.encoder is None else self.encoder.copy(),
            enc_rotation=self.enc_rotation.copy(),
            cov_rotation=self.cov_rotation.copy(),
            cov_param=None if self.cov_param is None else self.cov_param.copy(),
            local_mean=None if self.local_mean is None else self.local_mean.copy(),
        )

    # -- posterior -------------------------------------------------------
    def _encode(self, X):
        out, trace = forward(self.encoder, X)
        d = self.latent_dim
        return out[:, :d] @ self.enc_rotation.T, out, trace

    def encode_mean(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.mode == "unamortized":
            return self.local_mean.copy()
        return self._encode(X)[0]

    def raw_factor(self, X=None, idx=None):
        """Pre-mean-field factor: ``(n, d, d)``, or ``(1, d, d)`` if shared."""
        d = self.latent_dim
        if self.mode == "amortized":
            out = forward(self.encoder, np.atleast_2d(X))[0]
            return assemble_covariance(out[:, d:], self.structure, d)
        if self.mode == "shared":
            return (self.cov_rotation @ self.cov_param)[None]
        if self.mode == "unamortized":
            P = self.cov_param if idx is None else self.cov_param[idx]
            return _left_mul(self.cov_rotation, P)
        raise ValueError("deterministic model has no posterior covariance")

    def posterior(self, X=None, idx=None):
        """Posterior means and effective covariance factors."""
        if self.mode == "unamortized":
            mu = self.local_mean if idx is None else self.local_mean[idx]
        else:
            mu = self._encode(np.atleast_2d(X))[0]
        F = self.raw_factor(X, idx)
        if self.mean_field:
            F = _mean_field(F)[0]
        return mu, F

    def covariance(self, X=None, idx=None) -> np.ndarray:
        _, F = self.posterior(X, idx)
        return F @ np.swapaxes(F, -1, -2)


def _left_mul(O, P):
    """``O @ P[i]`` for every ``i`` as one (d, d) x (d, n*d) product."""
    n, d, k = P.shape
    return (O @ P.transpose(1, 0, 2).reshape(d, -1)).reshape(-1, n, k).transpose(1, 0, 2)


def _mean_field(F):
    s = np.sqrt(np.sum(F * F, axis=-1))
    return s[..., :, None] * np.eye(F.shape[-1]), s


def _logdet_and_inv_t(F):
    """``log|det F|`` and ``F^{-T}`` for a batch of square factors.

    2x2 factors take the closed form; the sweep trains thousands of 2x2
    per-example factors and the generic batched inverse dominated its
    run time.
    """
    d = F.shape[-1]
    if d == 2:
        a, b, c, e = F[..., 0, 0], F[..., 0, 1], F[..., 1, 0], F[..., 1, 1]
        det = a * e - b * c
        inv_t = np.stack([np.stack([e, -c], -1), np.stack([-b, a], -1)], -2) / det[..., None, None]
        return np.log(np.abs(det)), inv_t
    return np.linalg.slogdet(F)[1], np.swapaxes(np.linalg.inv(F), -1, -2)


def _scatter(target, idx, values):
    """``target[idx] += values``, without ``np.add.at`` for a full ordered batch."""
    if len(idx) == len(target) and np.array_equal(idx, np.arange(len(target))):
        target += values
    else:
        np.add.at(target, idx, values)


def init_model(cfg: TrainConfig, data_dim: int, n_data: int, rng) -> VaeModel:
    d = cfg.latent_dim
    structure = cfg.covariance_structure
    dec_sizes = [d, *cfg.decoder_hidden, data_dim]
    dec_acts = [cfg.hidden_activation] * len(cfg.decoder_hidden) + [cfg.output_activation]
    decoder = init_mlp(dec_sizes, dec_acts, rng)
    obs = ObservationModel(cfg.obs)
    if cfg.objective == "unamortized_vi":
        mode = "unamortized"
    elif cfg.objective == "grae_approx":
        mode = "deterministic"
    else:
        mode = cfg.cov_mode
    enc_rot = random_rotation(d, rng) if cfg.rotation_randomization else np.eye(d)
    cov_rot = random_rotation(d, rng) if cfg.rotation_randomization else np.eye(d)
    model = VaeModel(decoder, d, structure, mode, obs, enc_rotation=enc_rot, cov_rotation=cov_rot)
    if mode != "unamortized":
        out = d + (structure.n_free(d) if mode == "amortized" else 0)
        sizes = [data_dim, *cfg.encoder_hidden, out]
        acts = [cfg.hidden_activation] * len(cfg.encoder_hidden) + ["identity"]
        model.encoder = init_mlp(sizes, acts, rng)
    if mode == "shared":
        model.cov_param = np.diag(rng.uniform(0.3, 1.0, size=d))
    elif mode == "unamortized":
        model.local_mean = 0.1 * rng.standard_normal((n_data, d))
        model.cov_param = rng.uniform(0.3, 1.0, size=(n_data, d))[:, :, None] * np.eye(d)
    return model


# -- losses and gradients ----------------------------------------------------

def _zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def _add_net_grads(grads, prefix, pg):
    for i, (gw, gb) in enumerate(zip(pg.dW, pg.db)):
        grads[f"{prefix}.W{i}"] += gw
        grads[f"{prefix}.b{i}"] += gb


def elbo_loss_and_grads(model: VaeModel, X, idx, beta: float, rng):
    """Single-sample estimate of the mean negative beta-ELBO and its gradient.

    Per-example parameters receive the gradient of their own example's loss
    rather than of the batch mean.
    """
    x = X[idx]
    n, d = len(idx), model.latent_dim
    grads = _zero_grads(model.params())

    if model.mode == "unamortized":
        mu = model.local_mean[idx]
    else:
        mu, enc_out, enc_trace = model._encode(x)
    if model.mode == "amortized":
        raw = enc_out[:, d:]
        F = assemble_covariance(raw, model.structure, d)
    else:
        F = model.raw_factor(x, idx)
    shared = F.shape[0] == 1
    eps = rng.standard_normal((n, d))
    if model.mean_field:
        # effective factor diag(s); work with the vector s directly
        s = np.sqrt(np.sum(F * F, axis=-1))
        z = mu + s * eps
        sq, logdet = np.sum(s * s, axis=-1), np.sum(np.log(s), axis=-1)
    else:
        z = mu + (eps @ F[0].T if shared else (F @ eps[:, :, None])[:, :, 0])
        logdet, inv_t = _logdet_and_inv_t(F)
        sq = np.sum(F * F, axis=(-2, -1))
    g, dtrace = forward(model.decoder, z)
    ll = model.obs.loglik(x, g)
    kl = 0.5 * (np.sum(mu * mu, axis=-1) + sq - 2.0 * logdet - d)
    loss = float(np.mean(-ll + beta * kl))

    dec_grads, dz = backward(model.decoder, dtrace, -model.obs.grad(x, g) / n)
    _add_net_grads(grads, "dec", dec_grads)
    dmu = dz + beta * mu / n
    kl_weight = 1.0 if shared else 1.0 / n  # shared factor: n examples x 1/n
    if model.mean_field:
        ds = np.sum(dz * eps, axis=0, keepdims=True) if shared else dz * eps
        ds = ds + beta * kl_weight * (s - 1.0 / s)
        dF = (ds / s)[..., :, None] * F
    else:
        dF = (dz.T @ eps)[None] if shared else dz[:, :, None] * eps[:, None, :]
        dF = dF + beta * kl_weight * (F - inv_t)

    if model.mode == "amortized":
        draw = assemble_covariance_backward(raw, model.structure, d, dF)
        dout = np.concatenate([dmu @ model.enc_rotation, draw], axis=1)
        _add_net_grads(grads, "enc", backward(model.encoder, enc_trace, dout)[0])
    elif model.mode == "shared":
        grads["cov_param"] += model.cov_rotation.T @ dF[0]
        _add_net_grads(grads, "enc", backward(model.encoder, enc_trace, dmu @ model.enc_rotation)[0])
    else:
        _scatter(grads["local_mean"], idx, dmu * n)
        grads_cov = np.zeros_like(model.cov_param)
        _scatter(grads_cov, idx, _left_mul(model.cov_rotation.T, dF) * n)
        grads["cov_param"] = grads_cov
    return loss, grads


def grae_approx_loss_and_grads(model: VaeModel, X, idx, beta: float, k: int, rng):
    """Mean GRAE loss with the sampled Hadamard bound, and its gradient."""
    x = X[idx]
    n, d = len(idx), model.latent_dim
    grads = _zero_grads(model.params())
    h, _, enc_trace = model._encode(x)
    cols = rng.integers(0, d, size=(n, k))
    eye = np.eye(d)
    dh = beta * h / n
    reg = np.zeros(n)
    g = None
    for j in range(k):
        tan, jt = jvp(model.decoder, h, eye[cols[:, j]])
        sq = np.sum(tan * tan, axis=1)
        reg += np.log1p(sq / beta)
        up_t = (d / k) * tan / (1.0 + sq / beta)[:, None] / n
        up_v = None
        if j == 0:
            g = jt.forward.post[-1]
            up_v = -(x - g) / n
        pg, dz = jvp_backward(model.decoder, jt, up_v, up_t)
        _add_net_grads(grads, "dec", pg)
        dh = dh + dz
    loss_i = 0.5 * np.sum((x - g) ** 2, axis=1) + 0.5 * beta * np.sum(h * h, axis=1) + 0.5 * beta * (d / k) * reg
    _add_net_grads(grads, "enc", backward(model.encoder, enc_trace, dh @ model.enc_rotation)[0])
    return float(np.mean(loss_i)), grads


# -- optimizers ----------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "gd"
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(state: OptimizerState, params: dict, grads: dict, lr: float):
    """One GD or Adam update; returns ``(new_state, new_params)``."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    if state.kind == "gd":
        return state, {k: p - lr * grads[k] for k, p in params.items()}
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m, v, new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m.get(k, np.zeros_like(p)) + (1 - b1) * g
        v[k] = b2 * state.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        new[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
    return OptimizerState(state.kind, t, m, v, b1, b2, state.eps), new


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainingTrace:
    iterations: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def append(self, it, obj, lr):
        if self.iterations and it <= self.iterations[-1]:
            raise ValueError("trace iterations must increase")
        self.iterations.append(int(it))
        self.objective.append(float(obj))
        self.lr.append(float(lr))

    def to_csv(self, path) -> None:
        rows = ["iter,objective,lr"]
        rows += [f"{i},{format(o, '.17g')},{format(l, '.17g')}" for i, o, l in zip(self.iterations, self.objective, self.lr)]
        Path(path).write_text("\n".join(rows) + "\n")


def _batches(n, batch_size, rng):
    if batch_size <= 0 or batch_size >= n:
        full = np.arange(n)
        while True:
            yield full
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - batch_size + 1, batch_size):
            yield perm[s:s + batch_size]


def train(cfg: TrainConfig, dataset: Dataset | np.ndarray, rng=None, model: VaeModel | None = None,
          on_checkpoint=None, checkpoint_every: int = 0):
    """Train a model; returns ``(model, trace)``.

    ``on_checkpoint(iteration, model)`` is called before the first step, every
    ``checkpoint_every`` steps and after the last step. A non-finite loss
    raises ``NonFiniteObjective`` carrying the last good model.
    """
    X = dataset.X if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = init_model(cfg, X.shape[1], len(X), rng)
    if cfg.objective == "grae_approx" and cfg.obs != "gaussian_unit":
        raise ConfigError("grae_approx training supports gaussian_unit observations only")
    trace = TrainingTrace()
    state = OptimizerState("adam" if cfg.optimizer == "adam" else "gd")
    batches = _batches(len(X), cfg.batch_size, rng)
    if on_checkpoint is not None:
        on_checkpoint(0, model)
    for it in range(cfg.iterations):
        idx = next(batches)
        lr = cfg.lr_at(it)
        if cfg.objective == "grae_approx":
            loss, grads = grae_approx_loss_and_grads(model, X, idx, cfg.beta, cfg.k, rng)
        else:
            loss, grads = elbo_loss_and_grads(model, X, idx, cfg.beta, rng)
        if not np.isfinite(loss):
            raise NonFiniteObjective(f"non-finite objective at iteration {it}", last_good=model, iteration=it)
        if it % cfg.log_every == 0:
            trace.append(it, loss, lr)
        try:
            state, new = optimizer_step(state, model.params(), grads, lr)
        except NonFiniteGradient as exc:
            raise NonFiniteObjective(str(exc), last_good=model, iteration=it) from exc
        model.set_params(new)
        done = it + 1
        if on_checkpoint is not None and checkpoint_every > 0 and done % checkpoint_every == 0 and done != cfg.iterations:
            on_checkpoint(done, model)
    if on_checkpoint is not None and cfg.iterations > 0:
        on_checkpoint(cfg.iterations, model)
    return model, trace


def elbo_estimate(model: VaeModel, X, beta: float, n_samples: int, rng) -> float:
    """Mean beta-ELBO over ``X`` with ``n_samples`` draws per example."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mu, F = model.posterior(X)
    eps = rng.standard_normal((n_samples,) + mu.shape)
    z = mu + np.einsum("nij,snj->sni", np.broadcast_to(F, (len(mu),) + F.shape[1:]), eps)
    g = forward(model.decoder, z.reshape(-1, mu.shape[1]))[0]
    ll = model.obs.loglik(np.broadcast_to(X, (n_samples,) + X.shape).reshape(-1, X.shape[1]), g)
    return float(np.mean(ll) - beta * np.mean(kl_from_factor(mu, F)))


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    model: VaeModel
    rng_state: dict | None = None
    iteration: int = 0
    version: int = CHECKPOINT_VERSION


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def save_checkpoint(path, c: Checkpoint) -> None:
    m = c.model
    doc = {
        "version": c.version,
        "config": c.config.to_dict(),
        "iteration": c.iteration,
        "model": {
            "latent_dim": m.latent_dim,
            "structure": str(m.structure),
            "mode": m.mode,
            "obs": m.obs.kind,
        },
        "layers": {
            "decoder": net_to_doc(m.decoder),
            "encoder": None if m.encoder is None else net_to_doc(m.encoder),
        },
        "posterior_raw": {
            "enc_rotation": _arr(m.enc_rotation),
            "cov_rotation": _arr(m.cov_rotation),
            "cov_param": _arr(m.cov_param),
            "local_mean": _arr(m.local_mean),
        },
        "rng_state": c.rng_state,
    }
    try:
        Path(path).write_text(json.dumps(doc))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptDocument(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CorruptDocument(f"{path}: missing version")
    if doc["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {doc['version']} != {CHECKPOINT_VERSION}")
    try:
        meta, raw = doc["model"], doc["posterior_raw"]
        d = meta["latent_dim"]

        def arr(key, shape=None):
            v = raw.get(key)
            if v is None:
                return None
            a = np.array(v, dtype=float)
            return a.reshape(shape) if shape is not None else a

        model = VaeModel(
            decoder=net_from_doc(doc["layers"]["decoder"]),
            latent_dim=d,
            structure=CovarianceStructure.parse(meta["structure"]),
            mode=meta["mode"],
            obs=ObservationModel(meta["obs"]),
            encoder=None if doc["layers"]["encoder"] is None else net_from_doc(doc["layers"]["encoder"]),
            enc_rotation=arr("enc_rotation", (d, d)),
            cov_rotation=arr("cov_rotation", (d, d)),
            cov_param=arr("cov_param"),
            local_mean=arr("local_mean"),
        )
        if model.mode == "unamortized":
            model.cov_param = model.cov_param.reshape(-1, d, d)
            model.local_mean = model.local_mean.reshape(-1, d)
        return Checkpoint(TrainConfig.from_dict(doc["config"]), model, doc.get("rng_state"), doc.get("iteration", 0), doc["version"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDocument(f"{path}: {exc}") from exc
