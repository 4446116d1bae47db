#!/usr/bin/env python

"""Loads MNIST images from IDX files, normalises them to [0, 1] and exports a
summary. Also builds the deterministic synthetic datasets the tests use.

Usage: load_mnist_data.py --mnist_dir=<mnist_dir>
Options:
--mnist_dir=<mnist_dir>     Directory holding the MNIST image IDX files (plain or .gz)
"""

import gzip
import os
import sys
from dataclasses import dataclass

import numpy as np
from docopt import docopt

SRC_PATH = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if SRC_PATH not in sys.path:
    sys.path.append(SRC_PATH)
from src.utils.utils import make_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_HEADER_BYTES = 16
MNIST_SHAPE = (28, 28)
MNIST_FILES = {
    "train": "train-images-idx3-ubyte",
    "test": "t10k-images-idx3-ubyte",
}
MNIST_DIR_ENV = "HEPEX_MNIST_DIR"
DEFAULT_MNIST_DIR = os.path.join("data", "raw", "mnist")


class IdxFormatError(ValueError):
    """Raised when an IDX file does not follow the image layout."""

    def __init__(self, offset, reason):
        super().__init__(f"IDX format error at byte offset {offset}: {reason}")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    """Samples in rows, one feature per column, every value in [0, 1].

    Labels are never kept: the task is reconstruction.
    """

    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError(f"Expected a 2-d sample matrix, got shape {samples.shape}")
        if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
            raise ValueError("Dataset values must lie in [0.0, 1.0]")
        samples = samples.copy()
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def count(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    def take(self, n):
        """First ``n`` samples as a new dataset (used to cap training time)."""
        return Dataset(self.samples[:n])


def _read_bytes(images_path):
    if type(images_path) not in (str, bytes) and not isinstance(images_path, os.PathLike):
        raise ValueError(f"Expected images_path as a path, got {type(images_path)}")
    opener = gzip.open if str(images_path).endswith(".gz") else open
    with opener(images_path, "rb") as f:
        return f.read()


def load_mnist_idx(images_path, expected_shape=MNIST_SHAPE):
    """Reads an IDX image file into a normalised Dataset.

    Parameters
    ----------
    images_path : str or os.PathLike
        Location of an IDX3 image file; a ``.gz`` suffix is decompressed on the fly
    expected_shape : tuple of int, optional
        (rows, cols) each image must have, by default (28, 28)

    Returns
    -------
    Dataset
        One row per image, pixels divided by 255.0

    Raises
    ------
    IdxFormatError
        Wrong magic, wrong image dimensions or a payload of the wrong length.
        The message names the byte offset where the file went wrong.
    FileNotFoundError
        The path does not exist.

    Example
    -------
    train = load_mnist_idx(os.path.join("data", "raw", "mnist", "train-images-idx3-ubyte"))
    """
    raw = _read_bytes(images_path)

    if len(raw) < IDX_HEADER_BYTES:
        raise IdxFormatError(len(raw), f"header needs {IDX_HEADER_BYTES} bytes")

    magic, count, rows, cols = (int(v) for v in np.frombuffer(raw, dtype=">u4", count=4))
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(0, f"magic 0x{magic:08x} is not 0x{IDX_IMAGE_MAGIC:08x}")
    if (rows, cols) != tuple(expected_shape):
        raise IdxFormatError(8, f"image shape {rows}x{cols}, expected {expected_shape[0]}x{expected_shape[1]}")

    payload = len(raw) - IDX_HEADER_BYTES
    expected = count * rows * cols
    if payload < expected:
        raise IdxFormatError(len(raw), f"truncated payload, {payload} of {expected} pixel bytes")
    if payload > expected:
        raise IdxFormatError(IDX_HEADER_BYTES + expected, f"{payload - expected} trailing bytes")

    pixels = np.frombuffer(raw, dtype=np.uint8, offset=IDX_HEADER_BYTES, count=expected)
    return Dataset(pixels.reshape(count, rows * cols).astype(np.float64) / 255.0)


def mnist_dir_from_env(mnist_dir=None):
    """Directory to read MNIST from: explicit argument, then $HEPEX_MNIST_DIR, then the default."""
    if mnist_dir:
        return mnist_dir
    return os.environ.get(MNIST_DIR_ENV) or DEFAULT_MNIST_DIR


def load_mnist(mnist_dir=None):
    """Loads the standard train (60k) and test (10k) image sets.

    Parameters
    ----------
    mnist_dir : str, optional
        Directory with ``train-images-idx3-ubyte`` and ``t10k-images-idx3-ubyte``
        (optionally gzipped); defaults to $HEPEX_MNIST_DIR or data/raw/mnist

    Returns
    -------
    tuple of Dataset
        (train, test)
    """
    mnist_dir = mnist_dir_from_env(mnist_dir)
    loaded = []
    for split in ("train", "test"):
        path = os.path.join(mnist_dir, MNIST_FILES[split])
        if not os.path.exists(path) and os.path.exists(path + ".gz"):
            path = path + ".gz"
        loaded.append(load_mnist_idx(path))
    return tuple(loaded)


def synthetic_dataset(seed, count, dim, sparsity=0.0):
    """Deterministic dataset of uniform [0, 1] values with a fraction zeroed.

    Parameters
    ----------
    seed : int
        PRNG seed
    count : int
        Number of samples, >= 0
    dim : int
        Feature dimension, >= 1
    sparsity : float, optional
        Probability that each value is set to zero, by default 0.0

    Returns
    -------
    Dataset
    """
    if count < 0 or dim < 1:
        raise ValueError(f"Expected count >= 0 and dim >= 1, got count={count}, dim={dim}")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"Expected sparsity in [0, 1], got {sparsity}")
    rng = make_rng(seed)
    values = rng.random((count, dim))
    values[rng.random((count, dim)) < sparsity] = 0.0
    return Dataset(values)


def main():

    opt = docopt(__doc__)
    mnist_dir = opt["--mnist_dir"]

    print("Loading MNIST images...")
    train, test = load_mnist(mnist_dir)
    print(f"Train: {train.count} samples of dim {train.dim}, mean pixel {train.samples.mean():.4f}")
    print(f"Test: {test.count} samples of dim {test.dim}, mean pixel {test.samples.mean():.4f}")


if __name__ == "__main__":
    main()
