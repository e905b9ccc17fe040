"""Synthetic 2-D generator and IDX image ingestion."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, EmptySelection, IoError, TruncatedFile
from .network import activation

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass(frozen=True)
class SyntheticSpec:
    activation: str = "tanh"
    n: int = 4000
    noise_std: float = 0.05
    column_norms: tuple[float, float] = (2.0, 1.0)
    latent_dim: int = 2
    # "gaussian": i.i.d. normal entries; "orthogonal": QR of a normal draw;
    # "axis_aligned": diagonal W, each observed coordinate sees one latent
    w_mode: str = "gaussian"

    def __post_init__(self):
        if self.w_mode not in ("gaussian", "orthogonal", "axis_aligned"):
            raise ValueError(f"unknown w_mode {self.w_mode!r}")


@dataclass
class Dataset:
    X: np.ndarray
    Z_true: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)
    W: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if not np.all(np.isfinite(self.X)):
            raise ValueError("dataset has non-finite entries")
        if self.Z_true is not None and len(self.Z_true) != len(self.X):
            raise ValueError("Z_true and X row counts differ")

    def __len__(self):
        return len(self.X)


def synthetic_weights(spec: SyntheticSpec, rng) -> np.ndarray:
    d = spec.latent_dim
    W = rng.standard_normal((d, d))
    if spec.w_mode == "orthogonal":
        W = np.linalg.qr(W)[0]
    elif spec.w_mode == "axis_aligned":
        W = np.diag(np.diag(W))
    return W / np.linalg.norm(W, axis=0) * np.asarray(spec.column_norms, dtype=float)


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """``x = act(W z) + eps`` with ``z ~ N(0, I)``."""
    rng = np.random.default_rng(seed)
    W = synthetic_weights(spec, rng)
    Z = rng.standard_normal((spec.n, spec.latent_dim))
    f = activation(spec.activation)[0]
    X = f(Z @ W.T) + spec.noise_std * rng.standard_normal((spec.n, W.shape[0]))
    prov = {"source": "synthetic", "activation": spec.activation, "n": spec.n, "seed": seed}
    return Dataset(X, Z, prov, W)


def load_idx(path):
    """Parse a big-endian IDX file (images: magic 2051, labels: 2049)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(raw) < 8:
        raise TruncatedFile("file shorter than IDX header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic == IMAGE_MAGIC:
        if len(raw) < 16:
            raise TruncatedFile("file shorter than IDX image header")
        rows, cols = struct.unpack(">II", raw[8:16])
        shape, offset = (n, rows, cols), 16
    elif magic == LABEL_MAGIC:
        shape, offset = (n,), 8
    else:
        raise BadMagic(f"unexpected IDX magic {magic}")
    size = int(np.prod(shape))
    if len(raw) - offset < size:
        raise TruncatedFile(f"payload has {len(raw) - offset} bytes, header declares {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=offset).reshape(shape)


def write_idx(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 3:
        header = struct.pack(">IIII", IMAGE_MAGIC, *images.shape)
    elif images.ndim == 1:
        header = struct.pack(">II", LABEL_MAGIC, images.shape[0])
    else:
        raise ValueError("IDX writer supports (n, rows, cols) images or (n,) labels")
    Path(path).write_bytes(header + images.tobytes())


def _pool(images, k):
    n, h, w = images.shape
    return images.reshape(n, h // k, k, w // k, k).mean(axis=(2, 4))


def downsample(images, side: int) -> np.ndarray:
    """Average-pool 28x28 images to ``side`` x ``side``.

    8x8 uses the central 24x24 crop followed by 3x3 pooling.
    """
    images = np.asarray(images, dtype=float)
    if images.shape[1:] != (28, 28):
        raise ValueError("expected 28x28 images")
    if side == 28:
        return images
    if side == 14:
        return _pool(images, 2)
    if side == 8:
        return _pool(images[:, 2:26, 2:26], 3)
    raise ValueError("side must be one of 8, 14, 28")


def shuffled_order(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def preprocess(images, side: int, m: int, seed: int = 0, offset: int = 0) -> Dataset:
    """Pool, scale to [0, 1] and take ``m`` images from a seed-keyed shuffle.

    ``offset`` skips the first images of the shuffle, so a held-out split is
    ``preprocess(..., offset=m_train)``.
    """
    images = np.asarray(images)
    order = shuffled_order(len(images), seed)[offset:offset + m]
    if m < 1 or order.size == 0:
        raise EmptySelection("no images selected")
    pooled = downsample(images[order], side) / 255.0
    X = pooled.reshape(len(order), side * side)
    prov = {"source": "idx", "side": side, "m": int(order.size), "seed": seed, "offset": offset}
    return Dataset(np.clip(X, 0.0, 1.0), None, prov)


def digits_as_mnist_images() -> np.ndarray:
    """sklearn's 8x8 digits embedded as 28x28 uint8 images.

    Each pixel is upsampled 3x3 and the 24x24 result is padded by 2, so the
    8x8 preprocessing path recovers the original digits exactly (scaled by
    255/16).
    """
    from sklearn.datasets import load_digits

    imgs = load_digits().images  # values 0..16
    up = np.kron(imgs, np.ones((3, 3)))
    out = np.zeros((len(imgs), 28, 28))
    out[:, 2:26, 2:26] = up
    return np.rint(out * 255.0 / 16.0).astype(np.uint8)


def write_dataset_csv(path, X) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lines = [",".join(str(i) for i in range(X.shape[1]))]
    lines += [",".join(format(v, ".17g") for v in row) for row in X]
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset_csv(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise IoError(str(exc)) from exc
