"""Aggregation of local explanations into global and per-class salience.

NormLIME scores a feature by averaging, over the explanations that use it,
the feature's absolute weight times its share of that explanation's L1
mass. SP-LIME importance is the plain L2 norm of the feature's column.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_matrix, check_vector
from .exceptions import DegenerateWeightsError, EmptyClassError, InvalidSalienceError
from .local_surrogate import LocalExplanation, LocalSurrogateExplainer

METHODS = ("normlime", "splime_l2", "smoothgrad_sq", "vargrad", "shapley", "random")
GLOBAL = "global"


@dataclass
class SalienceMap:
    method: str
    scope: object  # "global" or an int class label
    scores: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        self.scores = check_vector(self.scores, name="scores")

    def __len__(self):
        return self.scores.shape[0]

    def to_dict(self):
        scope = self.scope if self.scope == GLOBAL else int(self.scope)
        return {"method": self.method, "scope": scope,
                "scores": [float(s) for s in self.scores],
                "provenance": self.provenance}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data):
        return cls(data["method"], data["scope"], np.asarray(data["scores"], dtype=float),
                   data.get("provenance", {}))

    def ranking(self):
        """Feature indices from least to most important (ties: lower index first)."""
        if not np.all(np.isfinite(self.scores)):
            raise InvalidSalienceError(f"{self.method} map has non-finite scores")
        return np.lexsort((np.arange(len(self)), self.scores))


class ExplanationSet:
    """A collection of local explanations over a common input space.

    Conceptually the matrix ``M`` whose rows are local weight vectors; it is
    materialised lazily by :attr:`matrix`.
    """

    def __init__(self, explanations, input_dim=None):
        self.explanations = list(explanations)
        if input_dim is None:
            if not self.explanations:
                raise ValueError("input_dim is required for an empty set")
            input_dim = self.explanations[0].input_dim
        self.input_dim = int(input_dim)
        for e in self.explanations:
            if e.input_dim != self.input_dim:
                raise ValueError("explanations do not share input_dim")
        self._matrix = None

    @classmethod
    def from_matrix(cls, M, labels):
        """Build a set directly from a dense weight matrix and anchor labels."""
        M = check_matrix(M)
        labels = np.asarray(labels, dtype=np.int64)
        rows = []
        for j, (w, y) in enumerate(zip(M, labels)):
            idx = np.flatnonzero(w)
            rows.append(LocalExplanation(np.zeros(M.shape[1]), int(y), int(y),
                                         idx, w[idx].copy(), 0.0, anchor_id=j))
        out = cls(rows, M.shape[1])
        out._matrix = M.copy()
        return out

    def __len__(self):
        return len(self.explanations)

    def __iter__(self):
        return iter(self.explanations)

    @property
    def matrix(self):
        if self._matrix is None:
            M = np.zeros((len(self), self.input_dim))
            for j, e in enumerate(self.explanations):
                M[j, e.indices] = e.values
            self._matrix = M
        return self._matrix

    @property
    def labels(self):
        return np.array([e.anchor_label for e in self.explanations], dtype=np.int64)

    def usage(self, i):
        """E(c_i): the explanations with a nonzero weight on feature ``i``."""
        return [e for e in self.explanations if e.weights.get(i, 0.0) != 0.0]

    def to_json(self, **kwargs):
        return json.dumps({"input_dim": self.input_dim,
                           "explanations": [e.to_dict() for e in self]}, **kwargs)


def gamma(w, i):
    """Share of explanation ``w``'s L1 mass carried by feature ``i``."""
    w = check_vector(w, name="w")
    total = np.abs(w).sum()
    if total == 0:
        raise DegenerateWeightsError("explanation has no nonzero weight")
    return abs(w[i]) / total


def _scores(M):
    M = np.asarray(M, dtype=np.float64)
    A = np.abs(M)
    row_l1 = A.sum(axis=1)
    used = A > 0
    count = used.sum(axis=0)
    safe_l1 = np.where(row_l1 > 0, row_l1, 1.0)
    total = ((A * A) / safe_l1[:, None]).sum(axis=0)
    out = np.zeros(M.shape[1])
    nz = count > 0
    out[nz] = total[nz] / count[nz]
    return out


def normlime(eset, scope=GLOBAL):
    """Global NormLIME importance of every feature.

    ``S(c_i) = mean over E(c_i) of gamma(w, i) * |w_i|``, and 0 for features
    that no explanation uses.
    """
    if len(eset) == 0:
        raise ValueError("empty explanation set")
    return SalienceMap("normlime", scope, _scores(eset.matrix),
                       {"n_explanations": len(eset)})


def normlime_matrix_form(eset, scope=GLOBAL):
    """NormLIME via ``(1/||omega_i||_0) omega_i' diag(1/v) omega_i`` per column."""
    if len(eset) == 0:
        raise ValueError("empty explanation set")
    M = eset.matrix
    v = np.abs(M).sum(axis=1)
    inv_v = np.divide(1.0, v, out=np.zeros_like(v), where=v > 0)
    scores = np.zeros(M.shape[1])
    for i in range(M.shape[1]):
        omega = M[:, i]
        l0 = np.count_nonzero(omega)
        if l0:
            scores[i] = omega @ (inv_v * omega) / l0
    return SalienceMap("normlime", scope, scores, {"n_explanations": len(eset)})


def splime_l2(eset, scope=GLOBAL):
    """SP-LIME importance: L2 norm of each feature's weight column."""
    if len(eset) == 0:
        raise ValueError("empty explanation set")
    return SalienceMap("splime_l2", scope, np.sqrt((eset.matrix ** 2).sum(axis=0)),
                       {"n_explanations": len(eset)})


def partition_by_label(eset, y):
    """Explanations whose anchor the model labels ``y`` (possibly none)."""
    return ExplanationSet([e for e in eset if e.anchor_label == y], eset.input_dim)


def _for_class(aggregate, eset, y):
    part = partition_by_label(eset, y)
    if len(part) == 0:
        raise EmptyClassError(y)
    return aggregate(part, scope=int(y))


def normlime_for_class(eset, y):
    return _for_class(normlime, eset, y)


def splime_l2_for_class(eset, y):
    return _for_class(splime_l2, eset, y)


def positive_part(smap, eset, y):
    """Zero features whose mean signed weight over E_y(c_i) is not positive."""
    part = partition_by_label(eset, y).matrix
    used = part != 0
    count = used.sum(axis=0)
    mean = np.divide(part.sum(axis=0), count, out=np.zeros(part.shape[1]),
                     where=count > 0)
    scores = np.where(mean > 0, smap.scores, 0.0)
    return SalienceMap(smap.method, smap.scope, scores,
                       {**smap.provenance, "positive_only": True})


class NormLIME(TransformerMixin, BaseEstimator):
    """Fit local surrogates over anchor rows and aggregate them.

    ``fit(X)`` explains every row of ``X`` with a local sparse surrogate of
    ``estimator``; ``transform(X)`` zeroes all but the ``keep_fraction``
    most salient features, so the selector can sit in a ``Pipeline``.

    Attributes
    ----------
    explanations_ : ExplanationSet
    scores_ : ndarray
        Global NormLIME score per feature.
    class_scores_ : dict
        Class label -> per-class NormLIME scores, for labels the model
        assigns to at least one anchor.
    """

    def __init__(self, estimator=None, k=20, lasso_lambda=None, num_samples=1000,
                 sigma=0.3, seed=0, keep_fraction=0.5, n_jobs=1):
        self.estimator = estimator
        self.k = k
        self.lasso_lambda = lasso_lambda
        self.num_samples = num_samples
        self.sigma = sigma
        self.seed = seed
        self.keep_fraction = keep_fraction
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        explainer = LocalSurrogateExplainer(
            self.estimator, k=self.k, lasso_lambda=self.lasso_lambda,
            num_samples=self.num_samples, sigma=self.sigma, seed=self.seed,
            n_jobs=self.n_jobs)
        return self.fit_explanations(ExplanationSet(explainer.explain_many(X)))

    def fit_explanations(self, eset):
        self.explanations_ = eset
        self.n_features_in_ = eset.input_dim
        self.salience_ = normlime(eset)
        self.scores_ = self.salience_.scores
        self.class_scores_ = {int(y): normlime_for_class(eset, y).scores
                              for y in np.unique(eset.labels)}
        return self

    def get_support(self):
        if not hasattr(self, "scores_"):
            raise NotFittedError("NormLIME is not fitted yet")
        d = self.n_features_in_
        n_drop = int(np.floor((1.0 - self.keep_fraction) * d + 1e-9))
        support = np.ones(d, dtype=bool)
        support[self.salience_.ranking()[:n_drop]] = False
        return support

    def transform(self, X):
        X = check_matrix(X, getattr(self, "n_features_in_", None))
        return X * self.get_support()
