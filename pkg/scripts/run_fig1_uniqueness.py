"""Rotation angle vs ELBO on the 2-D synthetic data, for the four
(amortized | unamortized) x (diagonal | full) arms.

Writes one CSV per arm plus a summary of the top-decile-ELBO trials.
``--w-mode axis_aligned`` runs the supplementary generator whose mixing
matrix is diagonal (see the notes in README).
"""
import argparse
import json
import logging
from pathlib import Path

from grae_lab.experiments import SweepConfig, angle_summary, top_decile, uniqueness_sweep, write_sweep_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="results/fig1")
    ap.add_argument("--activation", default="tanh")
    ap.add_argument("--w-mode", default="gaussian", choices=["gaussian", "orthogonal", "axis_aligned"])
    ap.add_argument("--beta", type=float, default=0.3)
    ap.add_argument("--schedule", default="200,500,1000,2000")
    ap.add_argument("--trials-per-n", type=int, default=10)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--arms", default="amortized:diagonal,amortized:full,unamortized:diagonal,unamortized:full")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for arm in args.arms.split(","):
        mode, structure = arm.split(":")
        cfg = SweepConfig(activation=args.activation, structure=structure, mode=mode, beta=args.beta,
                          n_schedule=tuple(int(n) for n in args.schedule.split(",")),
                          trials_per_n=args.trials_per_n, master_seed=args.seed, w_mode=args.w_mode,
                          workers=args.workers)
        rows = uniqueness_sweep(cfg, progress=lambda r: logging.info("%s trial %d n=%d angle=%.2f elbo=%.4f",
                                                                      arm, r.trial, r.n_schedule, r.angle, r.elbo))
        write_sweep_csv(out / f"{mode}_{structure}.csv", rows)
        summary[arm] = angle_summary(top_decile(rows))
        print(arm, summary[arm])
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
