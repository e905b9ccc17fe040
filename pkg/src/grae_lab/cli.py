"""``grae-lab`` command line.

Config is a flat ``key = value`` file. Precedence, lowest first: built-in
defaults, the config file, ``GRAE_LAB_SEED``, then ``--seed`` / ``--out-dir``
/ ``--set key=value`` flags. Exit codes: 0 success, 2 usage or config
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics
from .datasets import Dataset, SyntheticSpec, gen_synthetic, load_idx, preprocess, write_dataset_csv
from .errors import ConfigError, DocumentError, EmptySelection, NumericalError
from .experiments import (
    COMPARE_HEADER,
    SweepConfig,
    angle_summary,
    compare_row,
    evaluate_objectives,
    jacobian_structure,
    top_decile,
    uniqueness_sweep,
    write_sweep_csv,
)
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("grae_lab")

DEFAULTS = {
    "objective": "beta_vae",
    "beta": 1.0,
    "posterior.structure": "diagonal",
    "posterior.mode": "amortized",
    "latent_dim": 2,
    "iterations": 1000,
    "seed": 0,
    "schedule.n": "",
    "trials.per_n": 10,
    "sweep.mode": "amortized",
    "data.preset": "synthetic",
    "data.activation": "tanh",
    "data.w_mode": "gaussian",
    "data.n": 4000,
    "data.idx_path": "",
    "data.side": 8,
    "data.m": 2000,
    "eval.mc_samples": 64,
    "eval.test_size": 500,
    "eval.points": 50,
    "train.optimizer": "adam",
    "train.lr": 1e-3,
    "train.batch_size": 64,
    "train.encoder_hidden": "",
    "train.decoder_hidden": "",
    "train.hidden_activation": "elu",
    "train.output_activation": "identity",
    "train.obs": "gaussian_unit",
    "train.rotation_randomization": False,
    "train.k": 1,
    "train.log_every": 10,
    "train.checkpoint_every": 0,
    "checkpoint_dir": "",
    "checkpoint": "",
    "out_dir": "out",
}

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _coerce(key: str, text):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = _coerce(k, v)
    return out


def resolve_config(path=None, overrides=(), env=None, seed=None, out_dir=None) -> dict:
    env = os.environ if env is None else env
    cfg = dict(DEFAULTS)
    if path:
        try:
            cfg.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if env.get("GRAE_LAB_SEED"):
        cfg["seed"] = _coerce("seed", env["GRAE_LAB_SEED"])
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _coerce(k.strip(), v)
    return cfg


def _int_list(text) -> tuple:
    text = str(text).strip()
    if not text:
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# -- data ---------------------------------------------------------------------------

def _mnist_images(cfg):
    path = cfg["data.idx_path"]
    if not path:
        raise ConfigError("data.preset = mnist needs data.idx_path")
    return load_idx(path)


def load_split(cfg, split: str = "train") -> Dataset:
    """Training or held-out split for the configured preset."""
    preset = cfg["data.preset"]
    seed = cfg["seed"]
    if preset == "synthetic":
        if split == "train":
            spec = SyntheticSpec(cfg["data.activation"], n=cfg["data.n"], w_mode=cfg["data.w_mode"])
            return gen_synthetic(spec, seed)
        if cfg["eval.test_size"] < 1:
            raise EmptySelection("eval.test_size must be >= 1")
        # same W (same seed), fresh latents and noise
        spec = SyntheticSpec(cfg["data.activation"], n=cfg["data.n"] + cfg["eval.test_size"], w_mode=cfg["data.w_mode"])
        full = gen_synthetic(spec, seed)
        sl = slice(cfg["data.n"], None)
        return Dataset(full.X[sl], full.Z_true[sl], {**full.provenance, "split": "test"}, full.W)
    if preset == "mnist":
        images = _mnist_images(cfg)
        if split == "train":
            return preprocess(images, cfg["data.side"], cfg["data.m"], seed=seed)
        return preprocess(images, cfg["data.side"], cfg["eval.test_size"], seed=seed, offset=cfg["data.m"])
    raise ConfigError(f"unknown data.preset {preset!r}")


def train_config(cfg) -> TrainConfig:
    sched = _int_list(cfg["schedule.n"])
    return TrainConfig(
        objective=cfg["objective"],
        beta=cfg["beta"],
        iterations=cfg["iterations"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["seed"],
        structure=cfg["posterior.structure"],
        cov_mode=cfg["posterior.mode"],
        rotation_randomization=cfg["train.rotation_randomization"],
        optimizer=cfg["train.optimizer"],
        lr=cfg["train.lr"],
        schedule_n=sched[0] if sched else 0,
        latent_dim=cfg["latent_dim"],
        encoder_hidden=_int_list(cfg["train.encoder_hidden"]),
        decoder_hidden=_int_list(cfg["train.decoder_hidden"]),
        hidden_activation=cfg["train.hidden_activation"],
        output_activation=cfg["train.output_activation"],
        obs=cfg["train.obs"],
        k=cfg["train.k"],
        log_every=cfg["train.log_every"],
    )


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(cfg, out: Path) -> list[str]:
    train_split = load_split(cfg, "train")
    files = []
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(out / "data.csv", train_split.X)
    files.append("data.csv")
    if train_split.Z_true is not None:
        write_dataset_csv(out / "latents.csv", train_split.Z_true)
        files.append("latents.csv")
    if cfg["data.preset"] == "mnist" and cfg["eval.test_size"] > 0:
        write_dataset_csv(out / "test.csv", load_split(cfg, "test").X)
        files.append("test.csv")
    return files


def cmd_train(cfg, out: Path) -> list[str]:
    tc = train_config(cfg)
    data = load_split(cfg, "train")
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    files = []
    rng = np.random.default_rng(tc.seed)

    def snapshot(it, model):
        name = f"checkpoints/ckpt_{it:07d}.json"
        save_checkpoint(out / name, Checkpoint(tc, model, rng.bit_generator.state, it))
        files.append(name)

    _, trace = train(tc, data, rng=rng, on_checkpoint=snapshot, checkpoint_every=cfg["train.checkpoint_every"])
    trace.to_csv(out / "trace.csv")
    files.append("trace.csv")
    return files


def cmd_uniqueness_sweep(cfg, out: Path) -> list[str]:
    sched = _int_list(cfg["schedule.n"]) or SweepConfig.n_schedule
    sc = SweepConfig(
        activation=cfg["data.activation"],
        structure=cfg["posterior.structure"],
        mode=cfg["sweep.mode"],
        beta=cfg["beta"],
        n_schedule=sched,
        trials_per_n=cfg["trials.per_n"],
        master_seed=cfg["seed"],
        data_n=cfg["data.n"],
        w_mode=cfg["data.w_mode"],
    )
    rows = uniqueness_sweep(sc, progress=lambda r: log.info("trial %d n=%d angle=%.2f", r.trial, r.n_schedule, r.angle))
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "uniqueness.csv", rows)
    summ = angle_summary(top_decile(rows))
    (out / "uniqueness_summary.json").write_text(json.dumps(summ, indent=2))
    return ["uniqueness.csv", "uniqueness_summary.json"]


def _checkpoints(cfg) -> list[Path]:
    d = cfg["checkpoint_dir"]
    paths = sorted(Path(d).glob("*.json")) if d else []
    if not paths:
        raise ConfigError(f"no checkpoints found in {d!r}")
    return paths


def cmd_compare_objectives(cfg, out: Path) -> list[str]:
    paths = _checkpoints(cfg)
    test = load_split(cfg, "test")
    rng = np.random.default_rng(cfg["seed"])
    lines = [COMPARE_HEADER]
    for p in paths:
        ck = load_checkpoint(p)
        rep = evaluate_objectives(ck.model, test.X, ck.config.beta, cfg["eval.mc_samples"], rng)
        lines.append(compare_row(p.stem, ck.config.beta, rep))
    out.mkdir(parents=True, exist_ok=True)
    (out / "objectives.csv").write_text("\n".join(lines) + "\n")
    return ["objectives.csv"]


def cmd_jacobian_structure(cfg, out: Path) -> list[str]:
    if not cfg["checkpoint"]:
        raise ConfigError("jacobian-structure needs checkpoint = <path>")
    ck = load_checkpoint(cfg["checkpoint"])
    test = load_split(cfg, "test")
    m = min(cfg["eval.points"], len(test.X))
    b = ck.model.structure.block_size(ck.model.latent_dim)
    res = jacobian_structure(ck.model, test.X[:m], ck.config.beta, b)
    mdir = out / "matrices"
    mdir.mkdir(parents=True, exist_ok=True)
    files, lines = [], ["point,off_block_mass,metric_residual"]
    for P, G, row in res:
        for tag, mat in (("precision", P), ("jtj", G)):
            name = f"matrices/{tag}_{row.point:04d}.csv"
            numerics.write_matrix_csv(out / name, mat)
            files.append(name)
        lines.append(f"{row.point},{row.off_block_mass!r},{row.metric_residual!r}")
    (out / "structure.csv").write_text("\n".join(lines) + "\n")
    files.append("structure.csv")
    return files


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "uniqueness-sweep": cmd_uniqueness_sweep,
    "compare-objectives": cmd_compare_objectives,
    "jacobian-structure": cmd_jacobian_structure,
}


def write_manifest(out: Path, command: str, cfg: dict, files: list[str], seconds: float) -> None:
    doc = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "out_dir": str(out),
        "files": files,
        "duration_s": seconds,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grae-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out-dir")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.time()
    try:
        cfg = resolve_config(args.config, args.set, seed=args.seed, out_dir=args.out_dir)
        out = Path(cfg["out_dir"])
        files = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, files, time.time() - t0)
    except NumericalError as exc:
        print(f"grae-lab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DocumentError, EmptySelection, ValueError, OSError) as exc:
        print(f"grae-lab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
