"""Experiment pipelines behind the CLI: uniqueness sweep, objective
comparison over checkpoints, and Jacobian-structure exports."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics, objectives
from .datasets import Dataset, SyntheticSpec, gen_synthetic
from .errors import EmptySelection, GraeLabError
from .network import forward, input_jacobian
from .objectives import ObjectiveConfig, ObjectiveReport
from .probmodel import LOG_2PI
from .symmetry import procrustes_align
from .trainer import TrainConfig, VaeModel, elbo_estimate, train

log = logging.getLogger(__name__)


# -- uniqueness sweep ------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    activation: str = "tanh"
    structure: str = "diagonal"
    mode: str = "amortized"  # "amortized" (shared Sigma, linear encoder) or "unamortized"
    beta: float = 0.3
    n_schedule: tuple = (200, 500, 1000, 2000)
    trials_per_n: int = 10
    master_seed: int = 0
    data_n: int = 4000
    w_mode: str = "gaussian"
    elbo_samples: int = 16
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("amortized", "unamortized"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        if self.trials_per_n < 1 or not self.n_schedule:
            raise ValueError("sweep needs at least one trial")
        object.__setattr__(self, "n_schedule", tuple(int(n) for n in self.n_schedule))


@dataclass
class SweepRow:
    trial: int
    n_schedule: int
    elbo: float
    angle: float
    residual: float
    status: str = "ok"

    def csv(self) -> str:
        return f"{self.trial},{self.n_schedule},{self.elbo!r},{self.angle!r},{self.residual!r},{self.status}"


SWEEP_HEADER = "trial,n_schedule,elbo,angle,residual,status"


def trial_seeds(master: int, trial: int) -> tuple[int, int]:
    """(data seed, training seed) derived from the master seed and trial index."""
    s = np.random.SeedSequence([master, trial]).generate_state(2)
    return int(s[0]), int(s[1])


def sweep_train_config(cfg: SweepConfig, n: int, seed: int) -> TrainConfig:
    return TrainConfig(
        objective="unamortized_vi" if cfg.mode == "unamortized" else "beta_vae",
        beta=cfg.beta,
        iterations=5 * n,
        batch_size=0,
        seed=seed,
        structure=cfg.structure,
        cov_mode="shared",
        rotation_randomization=True,
        optimizer="gd",
        schedule_n=n,
        latent_dim=2,
        output_activation=cfg.activation,
        log_every=max(1, n),
    )


def run_trial(cfg: SweepConfig, trial: int, n: int) -> SweepRow:
    data_seed, train_seed = trial_seeds(cfg.master_seed, trial)
    try:
        data = gen_synthetic(SyntheticSpec(cfg.activation, n=cfg.data_n, w_mode=cfg.w_mode), data_seed)
        tc = sweep_train_config(cfg, n, train_seed)
        rng = np.random.default_rng(train_seed)
        model, _ = train(tc, data, rng=rng)
        elbo = elbo_estimate(model, data.X, cfg.beta, cfg.elbo_samples, rng)
        al = procrustes_align(data.Z_true.T, model.encode_mean(data.X).T)
        if not np.isfinite(elbo):
            raise GraeLabError("non-finite ELBO")
        return SweepRow(trial, n, elbo, al.angle, al.residual)
    except (GraeLabError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("trial %d (n=%d) failed: %s", trial, n, exc)
        nan = float("nan")
        return SweepRow(trial, n, nan, nan, nan, "failed")


def sweep_plan(cfg: SweepConfig) -> list[tuple[int, int]]:
    plan, t = [], 0
    for n in cfg.n_schedule:
        for _ in range(cfg.trials_per_n):
            plan.append((t, n))
            t += 1
    return plan


def _run_trial_args(args):
    return run_trial(*args)


def uniqueness_sweep(cfg: SweepConfig, progress=None) -> list[SweepRow]:
    """Rows come back in trial order whatever the worker count."""
    plan = sweep_plan(cfg)
    if cfg.workers <= 1:
        rows = []
        for t, n in plan:
            rows.append(run_trial(cfg, t, n))
            if progress:
                progress(rows[-1])
        return rows
    with ProcessPoolExecutor(cfg.workers) as ex:
        rows = list(ex.map(_run_trial_args, [(cfg, t, n) for t, n in plan]))
    return sorted(rows, key=lambda r: r.trial)


def write_sweep_csv(path, rows) -> None:
    Path(path).write_text("\n".join([SWEEP_HEADER] + [r.csv() for r in rows]) + "\n")


def top_decile(rows: list[SweepRow]) -> list[SweepRow]:
    ok = [r for r in rows if r.status == "ok"]
    if not ok:
        return []
    k = max(1, int(np.ceil(0.1 * len(ok))))
    return sorted(ok, key=lambda r: r.elbo, reverse=True)[:k]


def angle_summary(rows) -> dict:
    a = np.array([r.angle for r in rows], dtype=float)
    if a.size == 0:
        return {"count": 0, "median_abs": float("nan"), "iqr": float("nan")}
    q75, q25 = np.percentile(a, [75, 25])
    return {"count": int(a.size), "median_abs": float(np.median(np.abs(a))), "iqr": float(q75 - q25)}


# -- objective comparison ------------------------------------------------------------

def _posterior_arrays(model: VaeModel, X):
    mu, F = model.posterior(X)
    F = np.broadcast_to(F, (len(mu),) + F.shape[1:])
    return mu, F


def objective_table(model: VaeModel, X, beta: float, mc_samples: int, rng, with_fd: bool = False) -> dict:
    """Per-row objective values for the rows of ``X``.

    GRAE values are put on the maximization scale with the Gaussian
    normalizer restored, so they sit on the same axis as the others.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) == 0:
        raise EmptySelection("empty evaluation split")
    obs, dec = model.obs, model.decoder
    D = X.shape[1]
    mu, F = _posterior_arrays(model, X)
    ocfg = ObjectiveConfig(beta=beta, mc_samples=mc_samples)
    keys = ("beta_vae_mc", "taylor_hessian", "taylor_jacobian_form", "profiled", "grae", "grae_approx", "gap")
    tab = {k: np.full(len(X), np.nan) for k in keys}
    for i, (x, h, f) in enumerate(zip(X, mu, F)):
        S = f @ f.T
        enc = lambda _x, h=h: h  # noqa: E731
        tab["beta_vae_mc"][i] = objectives.beta_vae_mc(enc, f, dec, obs, x, ocfg, rng)
        tab["taylor_jacobian_form"][i] = objectives.taylor_objective(h, S, dec, obs, x, beta)
        if with_fd:
            tab["taylor_hessian"][i] = objectives.taylor_objective(h, S, dec, obs, x, beta, mode="finite_difference")
        tab["profiled"][i] = objectives.profiled_objective(h, dec, obs, x, beta)
        if obs.kind == "gaussian_unit":
            tab["grae"][i] = -objectives.grae(enc, dec, x, beta) - 0.5 * D * LOG_2PI
            tab["grae_approx"][i] = -objectives.grae_approx(enc, dec, x, beta, 1, rng) - 0.5 * D * LOG_2PI
        J = input_jacobian(dec, h)
        w = np.sqrt(-obs.hessian_diag(x, forward(dec, h)[0]))
        tab["gap"][i] = objectives.taylor_gap(w[:, None] * J, S, beta)
    return tab


def evaluate_objectives(model: VaeModel, X, beta: float, mc_samples: int, rng, with_fd: bool = False) -> ObjectiveReport:
    """Average of :func:`objective_table` over the rows."""
    tab = objective_table(model, X, beta, mc_samples, rng, with_fd)
    return ObjectiveReport(**{k: float(np.mean(v)) for k, v in tab.items()})


COMPARE_HEADER = "checkpoint,beta,beta_vae_mc,taylor,grae,gap"


def compare_row(name: str, beta: float, rep: ObjectiveReport) -> str:
    vals = (rep.beta_vae_mc, rep.taylor_jacobian_form, rep.grae, rep.gap)
    return ",".join([name, repr(float(beta))] + [repr(float(v)) for v in vals])


# -- Jacobian structure -------------------------------------------------------------------

@dataclass
class StructureRow:
    point: int
    off_block_mass: float
    metric_residual: float


def jacobian_structure(model: VaeModel, X, beta: float, b: int):
    """Per-point precision ``Sigma^-1``, pullback ``J^T J`` and summary row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) == 0:
        raise EmptySelection("empty evaluation split")
    mu, F = _posterior_arrays(model, X)
    out = []
    for i, (h, f) in enumerate(zip(mu, F)):
        S = f @ f.T
        P = numerics.invert_pd(S)
        J = input_jacobian(model.decoder, h)
        G = J.T @ J
        G = 0.5 * (G + G.T)
        row = StructureRow(i, objectives.off_block_mass(G, b), objectives.metric_residual(J, S, beta))
        out.append((P, G, row))
    return out


@dataclass
class CheckpointSeries:
    """Model snapshots captured during ``train`` via ``on_checkpoint``."""

    iterations: list = field(default_factory=list)
    models: list = field(default_factory=list)

    def __call__(self, it, model):
        self.iterations.append(int(it))
        self.models.append(model.copy())


def train_with_snapshots(cfg: TrainConfig, data: Dataset, every: int):
    snaps = CheckpointSeries()
    model, trace = train(cfg, data, on_checkpoint=snaps, checkpoint_every=every)
    return model, trace, snaps
