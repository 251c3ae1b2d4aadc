"""IDX (MNIST) reader and writer. Plain or gzip-compressed files."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .core import Dataset

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)}")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} at offset 0 (expected 0x{magic:08x})")
    head_len = 4 + 4 * ndim
    if len(raw) < head_len:
        raise IdxFormatError(f"{path}: truncated dimension fields at offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head_len])
    n = int(np.prod(dims))
    if len(raw) < head_len + n:
        raise IdxFormatError(f"{path}: truncated data at offset {len(raw)}, "
                             f"expected {head_len + n} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head_len).reshape(dims)


def read_images(path) -> np.ndarray:
    """(N, rows, cols) unsigned bytes."""
    return _read_idx(path, IMAGE_MAGIC, 3)


def read_labels(path) -> np.ndarray:
    return _read_idx(path, LABEL_MAGIC, 1)


def write_idx(path, array: np.ndarray, compress: bool = True) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IMAGE_MAGIC if a.ndim == 3 else LABEL_MAGIC
    payload = struct.pack(">I", magic) + struct.pack(">" + "I" * a.ndim, *a.shape) + a.tobytes()
    if compress:
        # fixed mtime keeps the file byte-reproducible
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        Path(path).write_bytes(payload)


def subsample_indices(n_total: int, count: int | None, seed: int) -> np.ndarray:
    if count is None or count >= n_total:
        return np.arange(n_total)
    if count < 1:
        raise ValueError("count must be positive")
    return np.random.default_rng(seed).choice(n_total, size=count, replace=False)


def load_mnist(images_path, labels_path, count: int | None = None, seed: int = 0,
               indices=None) -> Dataset:
    """Images as raw 0..255 reals (n0 = rows * cols), with integer labels.

    Either a seeded subsample of ``count`` images or explicit ``indices``.
    All rows are marked as training inputs.
    """
    images = read_images(images_path)
    labels = read_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    idx = np.asarray(indices) if indices is not None else subsample_indices(images.shape[0], count, seed)
    x = images[idx].reshape(len(idx), -1).astype(np.float64)
    return Dataset(x, labels=labels[idx].astype(np.int64))
