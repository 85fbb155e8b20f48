"""Dataset container and loaders for IDX (MNIST) and CSV files."""

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    source_digest: str = ""
    shape: tuple | None = None  # image (height, width) when known

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise DataError("instances and labels disagree in length")
        if self.X.shape[0] == 0:
            raise DataError("empty dataset")
        if not np.all(np.isfinite(self.X)):
            raise DataError("instances contain non-finite values")
        if self.y.min() < 0:
            raise DataError("labels must be nonnegative")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def num_classes(self):
        return int(self.y.max()) + 1

    def subset(self, idx, split=None):
        idx = np.asarray(idx)
        digest = hashlib.sha256(self.source_digest.encode() + idx.tobytes()).hexdigest()[:16]
        return Dataset(self.X[idx], self.y[idx], split or self.split, digest, self.shape)

    def subsample(self, n, seed, split=None):
        """Seeded subsample of ``n`` rows without replacement, in original order."""
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), n, replace=False)), split)


def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(blob, expected_magic, path):
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated IDX header at byte {len(blob)}")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated IDX header at byte {len(blob)}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims))
    if len(blob) != header + size:
        raise FormatError(f"{path}: payload has {len(blob) - header} bytes, header "
                          f"declares {size}; data ends at byte offset {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train"):
    """Load an IDX image/label pair; pixels are scaled to ``[0, 1]``.

    Either file may be gzip-compressed.
    """
    img_blob = _read_bytes(images_path)
    lab_blob = _read_bytes(labels_path)
    images = _parse_idx(img_blob, IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(lab_blob, IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    digest = hashlib.sha256(img_blob + lab_blob).hexdigest()[:16]
    n, h, w = images.shape
    return Dataset(images.reshape(n, h * w) / 255.0, labels.astype(np.int64),
                   split, digest, (h, w))


def find_mnist(directory, split):
    """Locate the standard MNIST file pair for ``split`` (plain or ``.gz``)."""
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            if (directory / candidate).exists():
                found.append(directory / candidate)
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")
    return tuple(found)


def load_mnist(directory, split="train"):
    return load_idx(*find_mnist(directory, split), split=split)


def load_csv(path, split="train"):
    """Load ``label,f0,f1,...`` rows (header line required)."""
    path = Path(path)
    raw = path.read_bytes()
    rows = list(csv.reader(raw.decode().splitlines()))
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    header = rows[0]
    if not header or header[0].strip() != "label":
        raise FormatError(f"{path}: header must start with 'label'")
    width = len(header)
    labels, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
        try:
            labels.append(int(row[0]))
        except ValueError:
            raise FormatError(f"{path}: line {lineno}, column 1: bad label {row[0]!r}") from None
        parsed = []
        for col, cell in enumerate(row[1:], start=2):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise FormatError(
                    f"{path}: line {lineno}, column {col}: non-numeric {cell!r}") from None
        values.append(parsed)
    return Dataset(np.array(values), np.array(labels), split,
                   hashlib.sha256(raw).hexdigest()[:16])
