"""Dataset ingestion (IDX, CIFAR-10 binary, synthetic blobs) and batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], split or self.split, self.num_classes)

    def split_at(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_train), "train"), self.subset(slice(n_train, None), "test")


class BatchIterator:
    """Seed-deterministic shuffled minibatches; each epoch is a permutation."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.position = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return -(-len(self.dataset) // self.batch_size)

    def epoch(self):
        n = len(self.dataset)
        order = self._rng.permutation(n) if self.shuffle else np.arange(n)
        self.position = 0
        while self.position < n:
            idx = order[self.position:self.position + self.batch_size]
            self.position += len(idx)
            yield self.dataset.images[idx], self.dataset.labels[idx]


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _idx_header(buf: bytes, expected_magic: int, path) -> tuple[int, tuple]:
    if len(buf) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    offset = 4 + 4 * ndim
    if len(buf) - offset != int(np.prod(dims)):
        raise DataFormatError(
            f"{path}: header promises {int(np.prod(dims))} bytes of data, found {len(buf) - offset}")
    return offset, dims


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    ibuf, lbuf = _open(images_path), _open(labels_path)
    ioff, idims = _idx_header(ibuf, IDX_IMAGES_MAGIC, images_path)
    loff, ldims = _idx_header(lbuf, IDX_LABELS_MAGIC, labels_path)
    if idims[0] != ldims[0]:
        raise DataFormatError(f"image count {idims[0]} does not match label count {ldims[0]}")
    n, h, w = idims
    images = np.frombuffer(ibuf, np.uint8, offset=ioff).reshape(n, 1, h, w)
    labels = np.frombuffer(lbuf, np.uint8, offset=loff)
    return Dataset(images.astype(np.float32) / np.float32(255.0), labels, split, num_classes)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Export a single-channel dataset to IDX (pixels quantized to uint8)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DataFormatError("IDX export supports single-channel images only")
    pixels = np.rint(dataset.images[:, 0] * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def load_cifar_bin(path, split: str = "test") -> Dataset:
    buf = _open(path)
    if len(buf) % CIFAR_RECORD:
        full = len(buf) // CIFAR_RECORD
        raise DataFormatError(
            f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD}; "
            f"record {full} is truncated at byte offset {full * CIFAR_RECORD}")
    rec = np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return Dataset(images, rec[:, 0], split, 10)


# ---------------------------------------------------------------------------
# synthetic


def synth_blobs(classes: int = 10, n_per_class: int = 100, dim: int = 64, seed: int = 0,
                noise_sigma: float = 0.15, split: str = "train") -> Dataset:
    """Gaussian clusters whose means are pairwise one unit apart.

    Class k's mean is 0.25 everywhere plus 1/sqrt(2) on its own (seeded)
    coordinate.  Square ``dim`` values yield (1, s, s) images, others (1, 1, dim).
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if classes > dim:
        raise ValueError("need dim >= classes")
    rng = np.random.default_rng(seed)
    axes = rng.choice(dim, size=classes, replace=False)
    means = np.full((classes, dim), 0.25)
    means[np.arange(classes), axes] += 1 / np.sqrt(2)
    labels = np.repeat(np.arange(classes), n_per_class)
    x = means[labels] + noise_sigma * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    x, labels = np.clip(x[order], 0, 1), labels[order]
    side = int(round(np.sqrt(dim)))
    shape = (1, side, side) if side * side == dim else (1, 1, dim)
    return Dataset(x.reshape(-1, *shape), labels, split, classes)


def mnist_subset_to_idx(out_dir) -> dict:
    """Write the 5000-sample MNIST subset bundled with ``mlxtend`` as IDX files.

    Returns the four paths (train/test images/labels) for a 4000/1000 split
    taken after a fixed shuffle.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError("the bundled MNIST subset needs `pip install mlxtend`") from exc
    x, y = mnist_data()
    order = np.random.default_rng(0).permutation(len(y))
    full = Dataset((x[order] / 255.0).reshape(-1, 1, 28, 28), y[order])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, part in zip(("train", "test"), full.split_at(4000)):
        paths[f"{name}_images"] = out / f"{name}-images-idx3-ubyte"
        paths[f"{name}_labels"] = out / f"{name}-labels-idx1-ubyte"
        save_idx(part, paths[f"{name}_images"], paths[f"{name}_labels"])
    return paths
