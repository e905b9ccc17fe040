"""Write sklearn's digits as a 28x28 IDX image file.

Offline stand-in for the MNIST image file: each 8x8 digit is upsampled 3x3
and padded to 28x28, so the 8x8 preprocessing path recovers it exactly.

    python3 scripts/make_digits_idx.py data/digits-images.idx
"""
import argparse
from pathlib import Path

from grae_lab.datasets import digits_as_mnist_images, write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path", nargs="?", default="data/digits-images.idx")
    args = ap.parse_args()
    out = Path(args.path)
    out.parent.mkdir(parents=True, exist_ok=True)
    imgs = digits_as_mnist_images()
    write_idx(out, imgs)
    print(f"wrote {len(imgs)} images to {out}")


if __name__ == "__main__":
    main()
