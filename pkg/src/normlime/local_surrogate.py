"""Sparse linear local surrogates of a black-box classifier.

A surrogate around an anchor ``x0`` is built by perturbing ``x0`` with
Gaussian noise, querying the black box for the probability of a target
class, and fitting a proximity-weighted linear model in two stages:
a weighted LASSO picks the ``k`` strongest features, then an unpenalised
weighted least-squares fit on those features gives the final weights.
"""

import json
from collections import namedtuple
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from ._validation import check_matrix, check_seed, check_vector, config_digest, derive_seed
from .exceptions import DegenerateWeightsError, InputShapeError
from .model import PROBABILITIES, input_dim_of, require

LocalDataset = namedtuple("LocalDataset", ["X", "targets", "weights"])

LAMBDA_GRID_SIZE = 20
LAMBDA_GRID_DECADES = 4
RIDGE_FALLBACK = 1e-8
_SINGULAR_COND = 1e12


@dataclass(frozen=True)
class PerturbationConfig:
    num_samples: int = 1000
    sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        check_seed(self.seed)


@dataclass(frozen=True)
class SurrogateConfig:
    """``lasso_lambda=None`` selects the penalty from a grid (see ``select_lambda``)."""

    k: int = 20
    lasso_lambda: float | None = None
    target: str = "predicted_class_probability"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.lasso_lambda is not None and self.lasso_lambda < 0:
            raise ValueError("lasso_lambda must be nonnegative")
        if self.target != "predicted_class_probability":
            raise ValueError(f"unknown surrogate target {self.target!r}")


@dataclass
class LocalExplanation:
    """One sparse local weight vector anchored at a data point."""

    anchor: np.ndarray
    anchor_label: int
    target_class: int
    indices: np.ndarray
    values: np.ndarray
    intercept: float
    seed: int = 0
    config_digest: str = ""
    anchor_id: int | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.anchor.shape[0]

    @property
    def weights(self):
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def dense(self):
        w = np.zeros(self.input_dim)
        w[self.indices] = self.values
        return w

    def predict(self, X):
        """Evaluate the surrogate on rows of ``X``."""
        X = check_matrix(X, self.input_dim)
        return X[:, self.indices] @ self.values + self.intercept

    def to_dict(self):
        return {
            "anchor_id": self.anchor_id,
            "anchor_label": int(self.anchor_label),
            "target_class": int(self.target_class),
            "intercept": float(self.intercept),
            "weights": [{"index": int(i), "value": float(v)}
                        for i, v in zip(self.indices, self.values)],
            "seed": int(self.seed),
            "config_digest": self.config_digest,
            "provenance": self.provenance,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data, anchor):
        entries = data["weights"]
        return cls(
            anchor=check_vector(anchor),
            anchor_label=int(data["anchor_label"]),
            target_class=int(data["target_class"]),
            indices=np.array([e["index"] for e in entries], dtype=np.int64),
            values=np.array([e["value"] for e in entries], dtype=np.float64),
            intercept=float(data["intercept"]),
            seed=int(data.get("seed", 0)),
            config_digest=data.get("config_digest", ""),
            anchor_id=data.get("anchor_id"),
            provenance=data.get("provenance", {}),
        )


def sample_locality(anchor, pcfg, model, target_class):
    """Draw the perturbed neighbourhood of ``anchor`` and score it.

    Returns a :class:`LocalDataset` of ``num_samples`` rows: perturbed
    inputs, the target-class probability at each, and the Gaussian
    proximity weight ``exp(-||x' - x0||^2 / (2 (sigma * sqrt(d))^2))``.
    """
    require(model, PROBABILITIES)
    d = input_dim_of(model)
    anchor = check_vector(anchor, d, "anchor")
    rng = np.random.default_rng(pcfg.seed)
    noise = rng.standard_normal((pcfg.num_samples, d)) * pcfg.sigma
    X = anchor + noise
    targets = np.asarray(model.predict_proba(X), dtype=np.float64)[:, target_class]
    if pcfg.sigma == 0:
        weights = np.ones(pcfg.num_samples)
    else:
        kernel_width = pcfg.sigma * np.sqrt(d)
        weights = np.exp(-np.sum(noise * noise, axis=1) / (2.0 * kernel_width ** 2))
    return LocalDataset(X, targets, weights)


@numba.njit(cache=True)
def _cd_gram(G, c, lam, beta, tol, max_sweeps):
    # Minimises b'Gb - 2c'b + lam * |b|_1 in place; G is symmetric PSD.
    d = c.shape[0]
    Gb = G @ beta
    half = 0.5 * lam
    for sweep in range(max_sweeps):
        max_change = 0.0
        for k in range(d):
            gkk = G[k, k]
            old = beta[k]
            if gkk <= 0.0:
                new = 0.0
            else:
                rho = c[k] - Gb[k] + gkk * old
                if rho > half:
                    new = (rho - half) / gkk
                elif rho < -half:
                    new = (rho + half) / gkk
                else:
                    new = 0.0
            diff = new - old
            if diff != 0.0:
                beta[k] = new
                for j in range(d):
                    Gb[j] += G[k, j] * diff
                if abs(diff) > max_change:
                    max_change = abs(diff)
        if max_change < tol:
            return sweep + 1
    return max_sweeps


class _WeightedProblem:
    """Weighted-centred sufficient statistics of a local dataset."""

    def __init__(self, X, y, sample_weight):
        X = check_matrix(X)
        y = check_vector(y, X.shape[0], "targets")
        w = check_vector(sample_weight, X.shape[0], "sample_weight")
        if X.shape[0] == 0:
            raise InputShapeError("empty local dataset")
        if np.any(w < 0):
            raise ValueError("sample weights must be nonnegative")
        total = w.sum()
        if total <= 0:
            raise DegenerateWeightsError("all sample weights are zero")
        w = w / total
        self.x_mean = w @ X
        if np.all(y == y[0]):
            # exact constant; the weighted mean can be off by an ulp
            self.y_mean = float(y[0])
        else:
            self.y_mean = float(w @ y)
        Xc = X - self.x_mean
        yc = y - self.y_mean
        gram = Xc.T @ (Xc * w[:, None])
        self.gram = 0.5 * (gram + gram.T)
        self.cov = Xc.T @ (w * yc)
        self.y_var = float(w @ (yc * yc))

    @property
    def lambda_max(self):
        """Smallest penalty at which every coefficient is zero."""
        return 2.0 * float(np.max(np.abs(self.cov))) if self.cov.size else 0.0

    def solve(self, lam, beta=None, tol=1e-8, max_sweeps=10_000):
        beta = np.zeros(self.cov.shape[0]) if beta is None else beta.copy()
        sweeps = _cd_gram(self.gram, self.cov, float(lam), beta, tol, max_sweeps)
        return beta, sweeps

    def intercept(self, beta, support=None):
        if support is None:
            return self.y_mean - float(self.x_mean @ beta)
        return self.y_mean - float(self.x_mean[support] @ beta)


def fit_weighted_lasso(X, y, sample_weight, lasso_lambda, tol=1e-8, max_sweeps=10_000):
    """Weighted LASSO by cyclic coordinate descent with soft-thresholding.

    Minimises ``sum_j w_j (y_j - b.x_j - b0)^2 / sum_j w_j + lambda * |b|_1``
    with an unpenalised intercept ``b0``. Iterates until the largest
    coefficient change in a sweep drops below ``tol``.

    Returns
    -------
    coef : ndarray of shape (n_features,)
    intercept : float
    """
    problem = _WeightedProblem(X, y, sample_weight)
    beta, _ = problem.solve(lasso_lambda, tol=tol, max_sweeps=max_sweeps)
    return beta, problem.intercept(beta)


def lambda_grid(lambda_max, size=LAMBDA_GRID_SIZE, decades=LAMBDA_GRID_DECADES):
    return lambda_max * np.logspace(0.0, -decades, size)


def select_lambda(problem, max_nonzero):
    """Walk a decreasing log-grid of penalties with warm starts.

    Stops before the first penalty whose solution has more than
    ``max_nonzero`` coefficients; returns ``(lambda, coef)`` for the
    smallest penalty reached.
    """
    lam_max = problem.lambda_max
    beta = np.zeros(problem.cov.shape[0])
    if lam_max == 0.0:
        return 0.0, beta
    best = (lam_max, beta)
    for lam in lambda_grid(lam_max):
        beta, _ = problem.solve(lam, beta)
        if np.count_nonzero(beta) > max_nonzero:
            break
        best = (float(lam), beta)
    return best


def top_k_support(coef, k):
    """Indices of the ``k`` largest ``|coef|``; ties go to the lower index."""
    order = np.lexsort((np.arange(coef.shape[0]), -np.abs(coef)))
    order = order[:k]
    return np.sort(order[coef[order] != 0])


def _refit(problem, support):
    G = problem.gram[np.ix_(support, support)]
    c = problem.cov[support]
    ridge = bool(support.size) and bool(np.linalg.cond(G) > _SINGULAR_COND)
    if ridge:
        G = G + RIDGE_FALLBACK * np.eye(support.size)
    beta = np.linalg.solve(G, c) if support.size else np.zeros(0)
    return beta, ridge


def explain_instance(anchor, model, pcfg=None, scfg=None, target_class=None,
                     anchor_id=None):
    """Fit one sparse local surrogate of ``model`` around ``anchor``.

    The regression target is the probability of ``target_class``, which
    defaults to the model's predicted label at the anchor. The result has
    at most ``scfg.k`` nonzero weights.
    """
    pcfg = pcfg or PerturbationConfig()
    scfg = scfg or SurrogateConfig()
    require(model, PROBABILITIES)
    d = input_dim_of(model)
    anchor = check_vector(anchor, d, "anchor")
    if scfg.k > d:
        raise ValueError(f"k={scfg.k} exceeds input dimension {d}")
    if pcfg.num_samples < scfg.k + 1:
        raise ValueError("num_samples must be at least k + 1")

    anchor_label = int(np.argmax(model.predict_proba(anchor[None, :])[0]))
    if target_class is None:
        target_class = anchor_label
    local = sample_locality(anchor, pcfg, model, target_class)
    problem = _WeightedProblem(*local)

    if scfg.lasso_lambda is None:
        lam, coef = select_lambda(problem, 3 * scfg.k)
    else:
        lam = scfg.lasso_lambda
        coef, _ = problem.solve(lam)
    support = top_k_support(coef, scfg.k)
    beta, ridge = _refit(problem, support)
    keep = beta != 0
    support, beta = support[keep], beta[keep]

    digest = config_digest({"perturbation": {**asdict(pcfg), "seed": None},
                            "surrogate": asdict(scfg)})
    return LocalExplanation(
        anchor=anchor,
        anchor_label=anchor_label,
        target_class=int(target_class),
        indices=support.astype(np.int64),
        values=beta,
        intercept=problem.intercept(beta, support),
        seed=pcfg.seed,
        config_digest=digest,
        anchor_id=anchor_id,
        provenance={"lasso_lambda": float(lam), "ridge_fallback": ridge},
    )


def weighted_r2(explanation, local):
    """Proximity-weighted R^2 of a surrogate on its own local dataset."""
    w = local.weights / local.weights.sum()
    resid = local.targets - explanation.predict(local.X)
    mean = w @ local.targets
    total = w @ (local.targets - mean) ** 2
    if total == 0:
        return 1.0 if np.allclose(resid, 0) else 0.0
    return 1.0 - (w @ resid ** 2) / total


class LocalSurrogateExplainer(BaseEstimator):
    """Estimator-style front end for building many local explanations.

    Each anchor ``i`` gets its own perturbation seed derived from ``seed``
    and the anchor id, so results do not depend on ``n_jobs`` or ordering.
    """

    def __init__(self, estimator=None, k=20, lasso_lambda=None, num_samples=1000,
                 sigma=0.3, seed=0, n_jobs=1):
        self.estimator = estimator
        self.k = k
        self.lasso_lambda = lasso_lambda
        self.num_samples = num_samples
        self.sigma = sigma
        self.seed = seed
        self.n_jobs = n_jobs

    def _configs(self, anchor_id):
        pcfg = PerturbationConfig(self.num_samples, self.sigma,
                                  derive_seed(self.seed, "anchor", anchor_id))
        return pcfg, SurrogateConfig(self.k, self.lasso_lambda)

    def explain(self, x, target_class=None, anchor_id=0):
        pcfg, scfg = self._configs(anchor_id)
        return explain_instance(x, self.estimator, pcfg, scfg,
                                target_class=target_class, anchor_id=anchor_id)

    def explain_many(self, X, target_classes=None, anchor_ids=None):
        """Explain each row of ``X``; returns a list of LocalExplanation."""
        X = check_matrix(X, input_dim_of(self.estimator))
        n = X.shape[0]
        ids = range(n) if anchor_ids is None else anchor_ids
        targets = [None] * n if target_classes is None else list(target_classes)
        jobs = (delayed(self.explain)(x, t, int(i)) for x, t, i in zip(X, targets, ids))
        return list(Parallel(n_jobs=self.n_jobs)(jobs))
