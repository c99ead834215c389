"""Datasets: IDX (MNIST-style) loading, normalisation, subsets and batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .net import make_rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_DIR_ENV = "CURVLAB_DATA_DIR"


class IDXError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # features x N
    labels: np.ndarray  # N class indices, or outputs x N targets
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError(f"dataset {self.name!r} has non-finite inputs")
        if self.labels.shape[-1] != self.inputs.shape[1]:
            raise ValueError(
                f"dataset {self.name!r}: {self.labels.shape[-1]} labels for "
                f"{self.inputs.shape[1]} inputs"
            )

    @property
    def N(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[:, idx], labels=self.labels[..., idx])


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndim:
        raise IDXError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IDXError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    need = int(np.prod(dims))
    if len(body) < need:
        raise IDXError(f"{path}: truncated data ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, name: str = "") -> Dataset:
    """Images become columns scaled to [0, 1]; labels are class indices."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IDXError(
            f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    X = images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), name or Path(images_path).name)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for ``uint8`` arrays of shape (N, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    for path, blob in (
        (images_path, struct.pack(">4I", IMAGE_MAGIC, *images.shape) + images.tobytes()),
        (labels_path, struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()),
    ):
        if str(path).endswith(".gz"):
            blob = gzip.compress(blob, mtime=0)
        Path(path).write_bytes(blob)


def data_dir(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    if os.environ.get(DATA_DIR_ENV):
        return Path(os.environ[DATA_DIR_ENV])
    return Path(__file__).resolve().parents[2] / "data"


def _find(root: Path, stem: str) -> Path:
    for cand in (root / f"{stem}.gz", root / stem):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no {stem}[.gz] under {root} (set {DATA_DIR_ENV})")


def load_mnist(name: str = "mnist", split: str = "train", root=None) -> Dataset:
    """Load ``<root>/<name>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``."""
    base = data_dir(root) / name
    prefix = "train" if split == "train" else "t10k"
    return load_idx(
        _find(base, f"{prefix}-images-idx3-ubyte"),
        _find(base, f"{prefix}-labels-idx1-ubyte"),
        name=f"{name}-{split}",
    )


def normalize(ds: Dataset, mean: float, std: float) -> Dataset:
    meta = dict(ds.meta, mean=float(mean), std=float(std))
    return replace(ds, inputs=(ds.inputs - mean) / std, meta=meta)


def stats(ds: Dataset) -> tuple[float, float]:
    return float(ds.inputs.mean()), float(ds.inputs.std())


def subset(ds: Dataset, k: int, seed: int = 0) -> Dataset:
    if k > ds.N:
        raise ValueError(f"subset of {k} requested from {ds.N} examples")
    idx = make_rng(seed).choice(ds.N, size=k, replace=False)
    return ds.take(idx)


def epoch_seed(seed: int, epoch: int) -> int:
    return (int(seed) * 1_000_033 + int(epoch) * 104_729 + 17) & 0xFFFFFFFF


def batches(ds: Dataset, B: int, seed: int = 0, shuffle: bool = True, epoch: int = 0):
    """Yield ``(X, y)`` column blocks covering the dataset once; last batch may be short."""
    if B > ds.N:
        raise ValueError(f"batch size {B} exceeds dataset size {ds.N}")
    order = make_rng(epoch_seed(seed, epoch)).permutation(ds.N) if shuffle else np.arange(ds.N)
    for start in range(0, ds.N, B):
        idx = order[start : start + B]
        yield ds.inputs[:, idx], ds.labels[..., idx]


def synth_toy() -> Dataset:
    """Two points (3, 1) -> 1 and (1, 0) -> -1 for a 1x2 linear model, squared loss."""
    X = np.array([[3.0, 1.0], [1.0, 0.0]])
    y = np.array([[1.0, -1.0]])
    return Dataset(X, y, "toy", {"loss": "mse", "sizes": [2, 1]})


def synth_blobs(n: int = 200, features: int = 8, classes: int = 3, seed: int = 0) -> Dataset:
    """Gaussian class clusters; a small stand-in for image data in tests."""
    rng = make_rng(seed)
    centers = rng.standard_normal((features, classes)) * 2.0
    labels = rng.integers(0, classes, size=n)
    X = centers[:, labels] + rng.standard_normal((features, n))
    return Dataset(X, labels.astype(np.int64), "blobs")
