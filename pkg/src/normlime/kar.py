"""Keep-And-Retrain evaluation of feature-importance rankings.

For each method, threshold and run the least important fraction of features
is masked to zero, a fresh model is trained on the masked data and its test
error is compared with an unmasked model. Masking can act on the raw inputs
or on the activations of one hidden layer.
"""

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin, clone

from ._validation import check_matrix, check_seed, derive_seed
from .baselines import (
    MAX_EXACT_SHAPLEY,
    NoiseConfig,
    masking_value_function,
    random_importance,
    shapley_exact,
    shapley_sampled,
    smoothgrad_sq,
    vargrad,
)
from .exceptions import CapabilityError, DivergenceError
from .local_surrogate import LocalSurrogateExplainer
from .model import HIDDEN_FEATURES, TrainConfig, capabilities
from .salience import GLOBAL, ExplanationSet, SalienceMap, normlime, splime_l2

DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))

# Method names accepted on the command line -> SalienceMap.method
METHOD_ALIASES = {
    "normlime": "normlime",
    "lime": "splime_l2",
    "splime_l2": "splime_l2",
    "smoothgrad_sq": "smoothgrad_sq",
    "vargrad": "vargrad",
    "shapley": "shapley",
    "random": "random",
}


def resolve_method(name):
    try:
        return METHOD_ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; valid methods: "
                         f"{', '.join(METHOD_ALIASES)}") from None


@dataclass(frozen=True)
class KarConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    num_runs: int = 5
    feature_space: str = "input"
    layer_index: int = 0
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if not t or any(not 0 < x < 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly increasing fractions in (0, 1)")
        object.__setattr__(self, "thresholds", t)
        if self.num_runs < 1:
            raise ValueError("num_runs must be positive")
        if self.feature_space not in ("input", "hidden"):
            raise ValueError("feature_space must be 'input' or 'hidden'")
        check_seed(self.seed)


@dataclass(frozen=True)
class KarRecord:
    method: str
    threshold: float
    run: int
    baseline_error: float
    retrained_error: float

    @property
    def error_gain(self):
        return self.retrained_error - self.baseline_error


@dataclass
class KarReport:
    records: list
    failures: list = field(default_factory=list)
    feature_space: str = "input"

    def methods(self):
        return list(dict.fromkeys(r.method for r in self.records))

    def thresholds(self):
        return sorted({r.threshold for r in self.records})

    def cell(self, method, threshold):
        return [r for r in self.records if r.method == method and r.threshold == threshold]

    def summary(self):
        """``{(method, threshold): {"mean", "std", "n", "failed"}}`` over error gains."""
        out = {}
        for m in self.methods():
            for t in self.thresholds():
                gains = np.array([r.error_gain for r in self.cell(m, t)])
                failed = sum(1 for f in self.failures
                             if f["method"] == m and f["threshold"] == t)
                out[(m, t)] = {
                    "mean": float(gains.mean()) if gains.size else float("nan"),
                    "std": float(gains.std(ddof=1)) if gains.size > 1 else 0.0,
                    "n": int(gains.size),
                    "failed": failed,
                }
        return out

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "threshold", "run", "baseline_error",
                         "retrained_error", "error_gain"])
        for r in self.records:
            writer.writerow([r.method, repr(r.threshold), r.run, repr(r.baseline_error),
                             repr(r.retrained_error), repr(r.error_gain)])
        return buf.getvalue()

    def to_json(self, **kwargs):
        cells = [{"method": m, "threshold": t, **stats}
                 for (m, t), stats in self.summary().items()]
        return json.dumps({"feature_space": self.feature_space, "cells": cells,
                           "failures": self.failures}, **kwargs)

    def table(self):
        """Mean error gain (percentage points) per method and threshold."""
        summary = self.summary()
        ts = self.thresholds()
        header = "method".ljust(14) + "".join(f"{int(round(t * 100)):>8d}%" for t in ts)
        lines = [header]
        for m in self.methods():
            row = "".join(f"{100 * summary[(m, t)]['mean']:>9.2f}" for t in ts)
            lines.append(m.ljust(14) + row)
        return "\n".join(lines)


def rank_features(smap):
    """Ascending-importance permutation of feature indices (ties: lower index first)."""
    return smap.ranking()


def n_removed(threshold, d):
    # Guard against binary representation (e.g. 0.29 * 100 = 28.999...).
    return int(np.floor(threshold * d + 1e-9))


def removal_mask(ranking, threshold):
    """Keep-vector (1.0 kept, 0.0 removed) for a ranking and threshold."""
    ranking = np.asarray(ranking)
    keep = np.ones(ranking.shape[0])
    keep[ranking[:n_removed(threshold, ranking.shape[0])]] = 0.0
    return keep


def mask_least_important(X, ranking, threshold):
    """Zero the ``floor(threshold * d)`` lowest-ranked features in every row."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    X = check_matrix(X, len(ranking))
    keep = removal_mask(ranking, threshold)
    return X * keep, keep


class FeatureMasker(TransformerMixin, BaseEstimator):
    """Pipeline step that zeroes the least important features of a ranking."""

    def __init__(self, ranking=None, threshold=0.5):
        self.ranking = ranking
        self.threshold = threshold

    def fit(self, X, y=None):
        self.keep_ = removal_mask(self.ranking, self.threshold)
        self.n_features_in_ = len(self.keep_)
        return self

    def transform(self, X):
        return check_matrix(X, self.n_features_in_) * self.keep_


# -- salience in the evaluated feature space ---------------------------------

@dataclass(frozen=True)
class AttributionConfig:
    """Settings shared by the attribution methods compared under KAR."""

    k: int = 20
    sigma: float = 0.3
    num_samples: int = 1000
    lasso_lambda: float | None = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    gradient_instances: int = 100
    shapley_instances: int = 10
    shapley_permutations: int = 20
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def select_anchors(labels, per_class, seed):
    """Indices of up to ``per_class`` rows of every label, seeded and sorted."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(check_seed(seed))
    chosen = []
    for y in np.unique(labels):
        pool = np.flatnonzero(labels == y)
        take = min(per_class, pool.size)
        chosen.append(rng.choice(pool, take, replace=False))
    return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=int)


def feature_space(model, X, space="input", layer_index=0):
    """Return ``(predictor, data)`` for the chosen feature space."""
    if space == "input":
        return model, check_matrix(X)
    if HIDDEN_FEATURES not in capabilities(model):
        raise CapabilityError(f"{type(model).__name__} does not expose hidden features")
    return model.head(layer_index), model.hidden_features(X, layer_index)


class SalienceComputer:
    """Global salience maps for every method over one feature space.

    Local explanations are computed once and shared by ``normlime`` and
    ``splime_l2``.
    """

    def __init__(self, predictor, data, acfg=None, n_jobs=1):
        self.predictor = predictor
        self.data = data
        self.acfg = acfg or AttributionConfig()
        self.n_jobs = n_jobs
        self._eset = None

    @property
    def d(self):
        return self.data.shape[1]

    def explanations(self):
        if self._eset is None:
            a = self.acfg
            explainer = LocalSurrogateExplainer(
                self.predictor, k=min(a.k, self.d), lasso_lambda=a.lasso_lambda,
                num_samples=a.num_samples, sigma=a.sigma, seed=a.seed, n_jobs=self.n_jobs)
            self._eset = ExplanationSet(explainer.explain_many(self.data), self.d)
        return self._eset

    def _subset(self, n, tag):
        n = min(n, self.data.shape[0])
        rng = np.random.default_rng(derive_seed(self.acfg.seed, tag))
        return np.sort(rng.choice(self.data.shape[0], n, replace=False))

    def _gradient_map(self, fn):
        idx = self._subset(self.acfg.gradient_instances, "gradient")
        labels = self.predictor.predict(self.data[idx])
        maps = []
        for j, (i, y) in enumerate(zip(idx, labels)):
            ncfg = NoiseConfig(self.acfg.noise.sigma, self.acfg.noise.num_noise_samples,
                               derive_seed(self.acfg.noise.seed, "noise", j))
            maps.append(fn(self.predictor, self.data[i], int(y), ncfg))
        return np.mean(maps, axis=0), [int(i) for i in idx]

    def _shapley_map(self):
        idx = self._subset(self.acfg.shapley_instances, "shapley")
        baseline = self.data.mean(axis=0)
        labels = self.predictor.predict(self.data[idx])
        phis = []
        for j, (i, y) in enumerate(zip(idx, labels)):
            v = masking_value_function(self.predictor, self.data[i], baseline, int(y))
            if self.d <= MAX_EXACT_SHAPLEY:
                phi = shapley_exact(v, self.d)
            else:
                phi = shapley_sampled(v, self.d, self.acfg.shapley_permutations,
                                      derive_seed(self.acfg.seed, "perm", j))
            phis.append(np.abs(phi))
        return np.mean(phis, axis=0), [int(i) for i in idx]

    def compute(self, method):
        method = resolve_method(method)
        prov = {"seed": self.acfg.seed}
        if method == "normlime":
            smap = normlime(self.explanations())
        elif method == "splime_l2":
            smap = splime_l2(self.explanations())
        elif method in ("smoothgrad_sq", "vargrad"):
            fn = smoothgrad_sq if method == "smoothgrad_sq" else vargrad
            scores, idx = self._gradient_map(fn)
            smap = SalienceMap(method, GLOBAL, scores, {"instances": idx})
        elif method == "shapley":
            scores, idx = self._shapley_map()
            smap = SalienceMap(method, GLOBAL, scores, {"instances": idx})
        else:
            smap = SalienceMap("random", GLOBAL,
                               random_importance(self.d, derive_seed(self.acfg.seed, "random")))
        smap.provenance.update(prov)
        return smap


def salience_for_hidden_features(model, X, method, acfg=None, layer_index=0, n_jobs=1):
    """Salience over the units of hidden layer ``layer_index``.

    Attributions treat the hidden activations of ``X`` as inputs to the
    layers above them.
    """
    predictor, H = feature_space(model, X, "hidden", layer_index)
    return SalienceComputer(predictor, H, acfg, n_jobs).compute(method)


# -- retraining grid -----------------------------------------------------------

def _error(model, X, y):
    return float(np.mean(model.predict(X) != y))


def _fit_cell(template, kcfg, X_train, y_train, X_test, y_test, keep, seed):
    params = dict(kcfg.train_cfg.to_dict(), seed=seed)
    if keep is not None and kcfg.feature_space == "hidden":
        params["hidden_mask"] = (kcfg.layer_index, keep)
    elif keep is not None:
        X_train, X_test = X_train * keep, X_test * keep
    model = clone(template).set_params(**params)
    try:
        model.fit(X_train, y_train)
    except DivergenceError as exc:
        return None, str(exc)
    return _error(model, X_test, y_test), None


def run_kar(template, train, test, maps, kcfg=None, n_jobs=1):
    """Run the Keep-And-Retrain grid.

    Parameters
    ----------
    template : estimator
        Unfitted model whose clones are retrained; training settings come
        from ``kcfg.train_cfg``.
    train, test : (X, y) tuples
    maps : dict
        Method name -> SalienceMap over the evaluated feature space.

    Every run ``r`` gets an unmasked baseline trained with its own seed.
    Retraining seeds are derived from ``(kcfg.seed, method, threshold, run)``.
    Diverged fits are dropped from the records and listed in ``failures``.
    """
    kcfg = kcfg or KarConfig()
    X_train, y_train = check_matrix(train[0]), np.asarray(train[1])
    X_test, y_test = check_matrix(test[0]), np.asarray(test[1])

    cells = [("__baseline__", None, r, None) for r in range(kcfg.num_runs)]
    for method, smap in maps.items():
        ranking = rank_features(smap)
        for t in kcfg.thresholds:
            keep = removal_mask(ranking, t)
            cells += [(method, t, r, keep) for r in range(kcfg.num_runs)]

    def seed_of(method, t, r):
        return derive_seed(kcfg.seed, method, "baseline" if t is None else repr(t), r)

    results = Parallel(n_jobs=n_jobs)(
        delayed(_fit_cell)(template, kcfg, X_train, y_train, X_test, y_test,
                           keep, seed_of(m, t, r))
        for m, t, r, keep in cells)

    baseline = {}
    records, failures = [], []
    for (m, t, r, _), (err, why) in zip(cells, results):
        if m == "__baseline__":
            if err is None:
                raise RuntimeError(f"unmasked baseline for run {r} failed: {why}")
            baseline[r] = err
            continue
        if err is None:
            failures.append({"method": m, "threshold": t, "run": r, "reason": why})
            continue
        records.append(KarRecord(m, t, r, baseline[r], err))
    return KarReport(records, failures, kcfg.feature_space)
