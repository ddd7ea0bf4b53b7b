"""Built-in learning tasks: synthetic Gaussian blobs and IDX image files.

The blob task is the default for simulations and tests: deterministic,
dependency-free and fast. The IDX reader accepts the classic big-endian
image/label format (MNIST-compatible), plain or gzipped, for fidelity runs.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True)
class Task:
    """A complete classification task: a training pool plus a test set."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    name: str = "task"

    def __post_init__(self):
        for arr in (self.train_x, self.train_y, self.test_x, self.test_y):
            arr.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def train_size(self) -> int:
        return self.train_x.shape[0]


def make_blobs_task(
    dim: int = 32,
    classes: int = 10,
    train_per_class: int = 300,
    test_per_class: int = 200,
    spread: float = 0.3,
    feature_scale: float = 0.5,
    seed: int = 0,
    informative_dims: int | None = None,
) -> Task:
    """K isotropic Gaussian clusters with standard-normal means.

    ``spread`` is the within-cluster standard deviation; ``feature_scale``
    rescales all features uniformly. When ``informative_dims`` is set, only
    that many leading dimensions carry class means; the rest are pure
    within-cluster noise, mimicking inputs where most features are
    irrelevant. Rows are shuffled so contiguous slices are class-balanced
    in expectation.
    """
    if dim < 1 or classes < 2:
        raise ValueError("need dim >= 1 and classes >= 2")
    if train_per_class < 1 or test_per_class < 1:
        raise ValueError("need at least one example per class and split")
    if informative_dims is None:
        informative_dims = dim
    if not 1 <= informative_dims <= dim:
        raise ValueError("informative_dims must lie in [1, dim]")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dim))
    means[:, :informative_dims] = rng.normal(0.0, 1.0, size=(classes, informative_dims))

    def split(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.repeat(np.arange(classes, dtype=np.int64), per_class)
        x = means[y] + spread * rng.normal(0.0, 1.0, size=(y.size, dim))
        x *= feature_scale
        order = rng.permutation(y.size)
        return x[order], y[order]

    train_x, train_y = split(train_per_class)
    test_x, test_y = split(test_per_class)
    return Task(train_x, train_y, test_x, test_y, classes, name="blobs")


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (gzipped or plain) into a numpy array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0:
        raise ValueError(f"{path}: bad IDX magic (leading bytes not zero)")
    if dtype_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX dtype code 0x{dtype_code:02x}")
    header_end = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    arr = np.frombuffer(data, dtype=_IDX_DTYPES[dtype_code], offset=header_end)
    expected = int(np.prod(dims)) if dims else 0
    if arr.size != expected:
        raise ValueError(f"{path}: payload size {arr.size} != header size {expected}")
    return arr.reshape(dims)


def load_idx_task(
    train_images, train_labels, test_images, test_labels, name: str = "idx"
) -> Task:
    """Build a Task from four IDX files; pixels flatten and scale to [0, 1]."""

    def images(path) -> np.ndarray:
        raw = read_idx(path)
        return raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0

    def labels(path) -> np.ndarray:
        return read_idx(path).reshape(-1).astype(np.int64)

    train_x, train_y = images(train_images), labels(train_labels)
    test_x, test_y = images(test_images), labels(test_labels)
    if train_x.shape[0] != train_y.shape[0] or test_x.shape[0] != test_y.shape[0]:
        raise ValueError("image and label counts disagree")
    classes = int(max(train_y.max(), test_y.max())) + 1
    return Task(train_x, train_y, test_x, test_y, classes, name=name)
