"""Small input-validation helpers used across the public API."""

import hashlib
import json

import numpy as np

from .exceptions import DataError, InputShapeError

MAX_SEED = 2**64 - 1


def check_vector(x, length=None, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError(f"{name} must be 1-D, got shape {x.shape}")
    if length is not None and x.shape[0] != length:
        raise InputShapeError(f"{name} must have length {length}, got {x.shape[0]}")
    return x


def check_matrix(X, n_features=None, name="X"):
    """Return ``X`` as a 2-D float64 array; a 1-D input is treated as one row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise InputShapeError(f"{name} must be 2-D, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise InputShapeError(
            f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_labels(y, n_samples, n_classes=None):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise InputShapeError(f"labels must be 1-D of length {n_samples}")
    if n_samples == 0:
        raise DataError("empty dataset")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise DataError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or (n_classes is not None and y.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def derive_seed(*parts):
    """Hash an arbitrary tuple of seeds/labels into a 64-bit seed.

    Used so that every cell of an experiment grid owns an independent,
    reproducible stream regardless of execution order.
    """
    text = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def config_digest(config):
    """Stable short digest of a JSON-serialisable mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
