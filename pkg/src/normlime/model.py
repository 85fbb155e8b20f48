"""Black-box predictor abstraction and a small feed-forward classifier.

The :class:`MLPClassifier` follows the scikit-learn estimator protocol
(``fit`` / ``predict`` / ``predict_proba`` / ``get_params``) and adds the
two capabilities the attribution methods need beyond probabilities:
exact input gradients of a class logit, and access to hidden activations.

Any object with a ``predict_proba(X)`` method is accepted as a black box by
the surrogate and Shapley code, so ordinary scikit-learn classifiers work.
"""

import copy
import struct
from dataclasses import asdict, dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_labels, check_matrix, check_seed, check_vector
from .exceptions import (
    CapabilityError,
    DataError,
    DivergenceError,
    FormatError,
    InputShapeError,
    VersionError,
)

MODEL_MAGIC = b"NLKM"
MODEL_FORMAT_VERSION = 1

PROBABILITIES = "probabilities"
GRADIENTS = "gradients"
HIDDEN_FEATURES = "hidden_features"


@runtime_checkable
class PredictorHandle(Protocol):
    """Anything that maps a batch of inputs to class probabilities."""

    def predict_proba(self, X): ...


def capabilities(model):
    """Return the set of capabilities ``model`` exposes."""
    caps = set()
    if hasattr(model, "predict_proba"):
        caps.add(PROBABILITIES)
    if hasattr(model, "input_gradient"):
        caps.add(GRADIENTS)
    if hasattr(model, "hidden_features"):
        caps.add(HIDDEN_FEATURES)
    return caps


def require(model, capability):
    if capability not in capabilities(model):
        raise CapabilityError(
            f"{type(model).__name__} does not support {capability}")


def input_dim_of(model):
    for attr in ("n_features_in_", "input_dim"):
        if hasattr(model, attr):
            return int(getattr(model, attr))
    raise CapabilityError(f"cannot determine input dimension of {type(model).__name__}")


def predict_proba(model, x):
    """Class-probability vector for a single input vector ``x``."""
    require(model, PROBABILITIES)
    x = check_vector(x, input_dim_of(model))
    return np.asarray(model.predict_proba(x[None, :]), dtype=np.float64)[0]


def gradient_wrt_input(model, x, class_index):
    """Gradient of the pre-softmax score of ``class_index`` at ``x``."""
    require(model, GRADIENTS)
    x = check_vector(x, input_dim_of(model))
    return model.input_gradient(x[None, :], class_index)[0]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class CallablePredictor:
    """Wrap plain functions as a predictor handle.

    ``proba_fn`` maps an ``(n, input_dim)`` array to ``(n, num_classes)``
    probabilities. ``gradient_fn``, when given, maps ``(X, class_index)`` to
    an ``(n, input_dim)`` gradient array.
    """

    def __init__(self, proba_fn, input_dim, num_classes, gradient_fn=None):
        self.proba_fn = proba_fn
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        if gradient_fn is not None:
            self.input_gradient = self._gradient
        self._gradient_fn = gradient_fn

    @property
    def n_features_in_(self):
        return self.input_dim

    def predict_proba(self, X):
        X = check_matrix(X, self.input_dim)
        return np.asarray(self.proba_fn(X), dtype=np.float64)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def _gradient(self, X, class_index):
        X = check_matrix(X, self.input_dim)
        return np.asarray(self._gradient_fn(X, class_index), dtype=np.float64)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 0.2
    seed: int = 0
    l2_penalty: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid training configuration {self}")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")
        check_seed(self.seed)

    def to_dict(self):
        return asdict(self)


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU multilayer perceptron with a softmax output, trained by plain SGD.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the hidden layers.
    epochs, batch_size, learning_rate, l2_penalty, seed
        Mini-batch SGD settings; see :class:`TrainConfig`.
    n_classes : int or None
        Number of output classes. Inferred as ``max(y) + 1`` when None.
    hidden_mask : tuple (layer_index, mask) or None
        Multiplies the post-activation output of one hidden layer by
        ``mask`` in every forward pass, during training and prediction.

    Attributes
    ----------
    coefs_ : list of ndarray
        Layer ``l`` has shape ``(layer_sizes_[l + 1], layer_sizes_[l])``.
    intercepts_ : list of ndarray
    layer_sizes_ : list of int
    initial_loss_ : float
        Training objective before the first update.
    loss_curve_ : list of float
        Mean mini-batch objective per epoch.
    """

    def __init__(self, hidden_layer_sizes=(128, 128), epochs=15, batch_size=64,
                 learning_rate=0.2, l2_penalty=1e-4, seed=0, n_classes=None,
                 hidden_mask=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.l2_penalty = l2_penalty
        self.seed = seed
        self.n_classes = n_classes
        self.hidden_mask = hidden_mask

    # -- construction -----------------------------------------------------

    @classmethod
    def from_weights(cls, coefs, intercepts, **params):
        """Build a fitted model directly from weight matrices and biases."""
        coefs = [np.array(W, dtype=np.float64) for W in coefs]
        intercepts = [np.array(b, dtype=np.float64) for b in intercepts]
        if len(coefs) != len(intercepts) or not coefs:
            raise InputShapeError("need one bias vector per weight matrix")
        sizes = [coefs[0].shape[1]]
        for W, b in zip(coefs, intercepts):
            if W.ndim != 2 or W.shape[1] != sizes[-1] or b.shape != (W.shape[0],):
                raise InputShapeError("weight shapes do not chain")
            sizes.append(W.shape[0])
        params.setdefault("hidden_layer_sizes", tuple(sizes[1:-1]))
        params.setdefault("n_classes", sizes[-1])
        model = cls(**params)
        model._set_weights(coefs, intercepts)
        return model

    def _set_weights(self, coefs, intercepts):
        self.coefs_ = coefs
        self.intercepts_ = intercepts
        self.layer_sizes_ = [coefs[0].shape[1]] + [W.shape[0] for W in coefs]
        self.n_features_in_ = self.layer_sizes_[0]
        self.classes_ = np.arange(self.layer_sizes_[-1])

    def _init_weights(self, n_features, n_classes, rng):
        sizes = [n_features, *self.hidden_layer_sizes, n_classes]
        coefs, intercepts = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            coefs.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            intercepts.append(np.zeros(fan_out))
        self._set_weights(coefs, intercepts)

    @property
    def train_config(self):
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate,
                           self.seed, self.l2_penalty)

    @property
    def n_hidden_layers(self):
        return len(self.layer_sizes_) - 2

    def _check_fitted(self):
        if not hasattr(self, "coefs_"):
            raise NotFittedError("MLPClassifier is not fitted yet")

    def _mask_for(self, layer):
        if self.hidden_mask is None:
            return None
        index, mask = self.hidden_mask
        return np.asarray(mask, dtype=np.float64) if index == layer else None

    # -- forward / backward -----------------------------------------------

    def _forward(self, X, start=0):
        """Run layers ``start..`` on ``X``; returns (logits, activations).

        ``activations[k]`` is the input to layer ``start + k``.
        """
        acts = [X]
        h = X
        n_layers = len(self.coefs_)
        for layer in range(start, n_layers):
            z = h @ self.coefs_[layer].T + self.intercepts_[layer]
            if layer == n_layers - 1:
                return z, acts
            h = np.maximum(z, 0.0)
            mask = self._mask_for(layer)
            if mask is not None:
                h = h * mask
            acts.append(h)
        return h, acts  # unreachable for a fitted model

    def _backprop_input(self, acts, grad_out, start=0):
        """Push ``grad_out`` (gradient w.r.t. logits) back to the layer input."""
        g = grad_out
        for k in range(len(acts) - 1, 0, -1):
            layer = start + k
            g = g @ self.coefs_[layer]
            mask = self._mask_for(layer - 1)
            if mask is not None:
                g = g * mask
            g = g * (acts[k] > 0)
        return g @ self.coefs_[start]

    def _objective(self, logits, y):
        z = logits - logits.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        ce = -log_p[np.arange(len(y)), y].mean()
        if self.l2_penalty:
            ce += 0.5 * self.l2_penalty * sum(np.sum(W * W) for W in self.coefs_)
        return ce

    def _sgd_step(self, Xb, yb):
        logits, acts = self._forward(Xb)
        loss = self._objective(logits, yb)
        delta = _softmax(logits)
        delta[np.arange(len(yb)), yb] -= 1.0
        delta /= len(yb)
        lr = self.learning_rate
        for layer in range(len(self.coefs_) - 1, -1, -1):
            grad_W = delta.T @ acts[layer]
            grad_b = delta.sum(axis=0)
            if layer > 0:
                delta = delta @ self.coefs_[layer]
                mask = self._mask_for(layer - 1)
                if mask is not None:
                    delta = delta * mask
                delta = delta * (acts[layer] > 0)
            if self.l2_penalty:
                grad_W += self.l2_penalty * self.coefs_[layer]
            self.coefs_[layer] -= lr * grad_W
            self.intercepts_[layer] -= lr * grad_b
        return loss

    def _run_epochs(self, X, y, rng):
        self.initial_loss_ = float(self._objective(self._forward(X)[0], y))
        self.loss_curve_ = []
        n = X.shape[0]
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            with np.errstate(over="ignore", invalid="ignore"):
                for start in range(0, n, self.batch_size):
                    idx = order[start:start + self.batch_size]
                    total += self._sgd_step(X[idx], y[idx]) * len(idx)
            loss = total / n
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            self.loss_curve_.append(loss)
        return self

    def fit(self, X, y):
        """Initialise weights from ``seed`` and train with mini-batch SGD."""
        X = check_matrix(X)
        if X.shape[0] == 0:
            raise DataError("empty dataset")
        y = check_labels(y, X.shape[0], self.n_classes)
        self.train_config  # validates hyper-parameters
        n_classes = self.n_classes or int(y.max()) + 1
        rng = np.random.default_rng(check_seed(self.seed))
        self._init_weights(X.shape[1], n_classes, rng)
        return self._run_epochs(X, y, rng)

    # -- inference ----------------------------------------------------------

    def decision_function(self, X):
        self._check_fitted()
        X = check_matrix(X, self.n_features_in_)
        return self._forward(X)[0]

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def loss(self, X, y):
        """Training objective (mean cross-entropy plus L2 term) on ``(X, y)``."""
        X = check_matrix(X, getattr(self, "n_features_in_", None))
        return float(self._objective(self.decision_function(X), np.asarray(y)))

    def input_gradient(self, X, class_index):
        """Exact gradient of logit ``class_index`` w.r.t. each row of ``X``."""
        self._check_fitted()
        X = check_matrix(X, self.n_features_in_)
        self._check_class(class_index)
        _, acts = self._forward(X)
        grad_out = np.zeros((X.shape[0], self.layer_sizes_[-1]))
        grad_out[:, class_index] = 1.0
        return self._backprop_input(acts, grad_out)

    def hidden_features(self, X, layer_index):
        """Post-activation output of hidden layer ``layer_index``."""
        self._check_fitted()
        if not 0 <= layer_index < self.n_hidden_layers:
            raise IndexError(f"hidden layer {layer_index} out of range "
                             f"[0, {self.n_hidden_layers})")
        X = check_matrix(X, self.n_features_in_)
        h = X
        for layer in range(layer_index + 1):
            h = np.maximum(h @ self.coefs_[layer].T + self.intercepts_[layer], 0.0)
            mask = self._mask_for(layer)
            if mask is not None:
                h = h * mask
        return h

    def head(self, layer_index):
        """Predictor over the activations of hidden layer ``layer_index``."""
        self._check_fitted()
        if not 0 <= layer_index < self.n_hidden_layers:
            raise IndexError(f"hidden layer {layer_index} out of range")
        return HeadPredictor(self, layer_index)

    def _check_class(self, class_index):
        if not 0 <= class_index < self.layer_sizes_[-1]:
            raise IndexError(f"class index {class_index} out of range")


class HeadPredictor:
    """The layers of an MLP above a hidden layer, viewed as a predictor.

    Inputs are activation vectors of hidden layer ``layer_index``; outputs
    are the network's class probabilities.
    """

    def __init__(self, model, layer_index):
        self.model = model
        self.layer_index = layer_index
        self.input_dim = model.layer_sizes_[layer_index + 1]
        self.num_classes = model.layer_sizes_[-1]

    @property
    def n_features_in_(self):
        return self.input_dim

    def decision_function(self, H):
        H = check_matrix(H, self.input_dim)
        return self.model._forward(H, start=self.layer_index + 1)[0]

    def predict_proba(self, H):
        return _softmax(self.decision_function(H))

    def predict(self, H):
        return self.decision_function(H).argmax(axis=1)

    def input_gradient(self, H, class_index):
        H = check_matrix(H, self.input_dim)
        self.model._check_class(class_index)
        start = self.layer_index + 1
        _, acts = self.model._forward(H, start=start)
        grad_out = np.zeros((H.shape[0], self.num_classes))
        grad_out[:, class_index] = 1.0
        return self.model._backprop_input(acts, grad_out, start=start)


def train(model, X, y, cfg):
    """Train a copy of ``model`` with ``cfg``.

    A fitted model continues from its current weights; an unfitted one is
    initialised from ``cfg.seed``. ``epochs=0`` returns the starting weights.
    """
    params = dict(model.get_params(), **cfg.to_dict())
    trained = type(model)(**params)
    if not hasattr(model, "coefs_"):
        return trained.fit(X, y)
    X = check_matrix(X, model.n_features_in_)
    if X.shape[0] == 0:
        raise DataError("empty dataset")
    y = check_labels(y, X.shape[0], model.layer_sizes_[-1])
    trained._set_weights(copy.deepcopy(model.coefs_), copy.deepcopy(model.intercepts_))
    return trained._run_epochs(X, y, np.random.default_rng(cfg.seed))


# -- persistence ------------------------------------------------------------

def save_model(model, path):
    """Write weights as ``NLKM`` | u32 version | u32 n_layers | u32 dims... | f64 data.

    Integers are little-endian; weight matrices are stored row-major
    followed by their bias vector, all as little-endian float64.
    """
    model._check_fitted()
    sizes = model.layer_sizes_
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", MODEL_FORMAT_VERSION, len(model.coefs_)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for W, b in zip(model.coefs_, model.intercepts_):
            f.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path, **params):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not an NLKM model file")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != MODEL_FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {version}, expected {MODEL_FORMAT_VERSION}")
    offset = 12
    if n_layers < 1 or len(blob) < offset + 4 * (n_layers + 1):
        raise FormatError(f"{path}: truncated header")
    sizes = struct.unpack_from(f"<{n_layers + 1}I", blob, offset)
    offset += 4 * (n_layers + 1)
    coefs, intercepts = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n_w, n_b = fan_in * fan_out, fan_out
        if len(blob) < offset + 8 * (n_w + n_b):
            raise FormatError(f"{path}: truncated payload at byte {offset}")
        W = np.frombuffer(blob, dtype="<f8", count=n_w, offset=offset)
        offset += 8 * n_w
        b = np.frombuffer(blob, dtype="<f8", count=n_b, offset=offset)
        offset += 8 * n_b
        coefs.append(W.reshape(fan_out, fan_in).astype(np.float64))
        intercepts.append(b.astype(np.float64))
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return MLPClassifier.from_weights(coefs, intercepts, **params)
