"""Block-diagonal vs full posterior on 8x8 digits: precision matrices,
pullback metrics and their summary statistics at the end of training."""
import argparse
from pathlib import Path

import numpy as np

from grae_lab.datasets import digits_as_mnist_images, load_idx, preprocess
from grae_lab.experiments import jacobian_structure, train_with_snapshots
from grae_lab.numerics import write_matrix_csv
from grae_lab.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--idx", help="28x28 IDX image file (defaults to the digits stand-in)")
    ap.add_argument("--out-dir", default="results/fig2")
    ap.add_argument("--beta", type=float, default=0.4)
    ap.add_argument("--iterations", type=int, default=4000)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--points", type=int, default=50)
    ap.add_argument("--m", type=int, default=1500)
    ap.add_argument("--export", type=int, default=4, help="points whose matrices are written out")
    args = ap.parse_args()

    imgs = load_idx(args.idx) if args.idx else digits_as_mnist_images()
    train_set = preprocess(imgs, 8, args.m)
    test_set = preprocess(imgs, 8, args.points, offset=args.m)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["seed,structure,off_block_mass,metric_residual_10pct,metric_residual_end"]
    for seed in range(args.seeds):
        for structure in ("block:2", "full"):
            cfg = TrainConfig(beta=args.beta, iterations=args.iterations, batch_size=64, seed=seed, structure=structure,
                              latent_dim=8, encoder_hidden=(64,), decoder_hidden=(64,), output_activation="sigmoid")
            _, _, snaps = train_with_snapshots(cfg, train_set, args.iterations // 10)
            end = jacobian_structure(snaps.models[-1], test_set.X, args.beta, 2)
            early = jacobian_structure(snaps.models[1], test_set.X, args.beta, 2)
            obm = np.mean([r.off_block_mass for _, _, r in end])
            mr0 = np.mean([r.metric_residual for _, _, r in early])
            mr1 = np.mean([r.metric_residual for _, _, r in end])
            lines.append(f"{seed},{structure},{obm!r},{mr0!r},{mr1!r}")
            print(lines[-1])
            if seed == 0:
                tag = structure.replace(":", "")
                for P, G, row in end[: args.export]:
                    write_matrix_csv(out / f"{tag}_precision_{row.point:02d}.csv", P)
                    write_matrix_csv(out / f"{tag}_jtj_{row.point:02d}.csv", G)
    (out / "structure.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
