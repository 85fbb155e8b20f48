"""Reference attribution methods: noisy-gradient maps, Shapley values, random."""

from dataclasses import dataclass
from math import factorial

import numpy as np

from ._validation import check_seed, check_vector
from .exceptions import EmptyClassError
from .model import GRADIENTS, PROBABILITIES, input_dim_of, require
from .salience import SalienceMap

MAX_EXACT_SHAPLEY = 15
_MASK_BATCH = 1 << 21


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.3
    num_noise_samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.num_noise_samples < 2:
            raise ValueError("num_noise_samples must be at least 2")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        check_seed(self.seed)


@dataclass(frozen=True)
class ClassAverageConfig:
    images_per_class: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.images_per_class < 1:
            raise ValueError("images_per_class must be at least 1")
        check_seed(self.seed)


def _shifted_mean(A):
    # Shifting by the first row keeps the mean of identical rows exact.
    ref = A[0]
    return ref + (A - ref).mean(axis=0)


def _shifted_var(A):
    return (A - A[0]).var(axis=0, ddof=1)


def _noisy_gradients(model, x, class_index, ncfg):
    require(model, GRADIENTS)
    x = check_vector(x, input_dim_of(model))
    rng = np.random.default_rng(ncfg.seed)
    noise = rng.standard_normal((ncfg.num_noise_samples, x.shape[0])) * ncfg.sigma
    return model.input_gradient(x + noise, class_index)


def smoothgrad_sq(model, x, class_index, ncfg=None):
    """Mean squared input gradient of the class logit under Gaussian input noise."""
    grads = _noisy_gradients(model, x, class_index, ncfg or NoiseConfig())
    return _shifted_mean(grads * grads)


def vargrad(model, x, class_index, ncfg=None):
    """Unbiased per-feature variance of ``|gradient|`` under Gaussian input noise."""
    grads = _noisy_gradients(model, x, class_index, ncfg or NoiseConfig())
    return _shifted_var(np.abs(grads))


def class_average_map(X, labels, y, instance_map, method, cacfg=None):
    """Average a per-instance attribution over sampled instances of class ``y``.

    ``instance_map(x)`` returns one attribution vector. When the class has
    fewer than ``images_per_class`` instances all of them are used and the
    provenance records ``"undersampled": True``.
    """
    cacfg = cacfg or ClassAverageConfig()
    labels = np.asarray(labels)
    pool = np.flatnonzero(labels == y)
    if pool.size == 0:
        raise EmptyClassError(y, "instances")
    undersampled = pool.size < cacfg.images_per_class
    if undersampled:
        chosen = pool
    else:
        rng = np.random.default_rng(cacfg.seed)
        chosen = np.sort(rng.choice(pool, cacfg.images_per_class, replace=False))
    maps = np.stack([np.asarray(instance_map(X[i]), dtype=np.float64) for i in chosen])
    return SalienceMap(method, int(y), _shifted_mean(maps),
                       {"instances": [int(i) for i in chosen],
                        "undersampled": bool(undersampled), "seed": cacfg.seed})


# -- Shapley values ----------------------------------------------------------

def masking_value_function(model, x, baseline, target_class):
    """Coalition value: target-class probability with absent features set to ``baseline``.

    The returned callable maps a boolean ``(m, d)`` coalition array to ``m``
    values.
    """
    require(model, PROBABILITIES)
    x = check_vector(x, input_dim_of(model))
    baseline = check_vector(baseline, x.shape[0], "baseline")

    def value(masks):
        masks = np.asarray(masks, dtype=bool)
        return model.predict_proba(np.where(masks, x, baseline))[:, target_class]

    return value


def _evaluate(value_function, masks):
    out = np.empty(masks.shape[0])
    step = max(1, _MASK_BATCH // max(1, masks.shape[1]))
    for start in range(0, masks.shape[0], step):
        out[start:start + step] = value_function(masks[start:start + step])
    return out


def shapley_exact(value_function, d):
    """Exact Shapley values by enumerating all ``2**d`` coalitions (``d <= 15``)."""
    if d > MAX_EXACT_SHAPLEY:
        raise ValueError(f"exact Shapley enumeration is limited to d <= {MAX_EXACT_SHAPLEY}"
                         f" (got {d}); use shapley_sampled instead")
    if d == 0:
        return np.zeros(0)
    codes = np.arange(1 << d)
    bits = 1 << np.arange(d)
    masks = (codes[:, None] & bits) != 0
    values = _evaluate(value_function, masks)
    sizes = masks.sum(axis=1)
    fd = factorial(d)
    weight = np.array([factorial(s) * factorial(d - s - 1) / fd for s in range(d)])
    phi = np.empty(d)
    for i in range(d):
        without = codes[(codes & bits[i]) == 0]
        phi[i] = np.sum(weight[sizes[without]] * (values[without | bits[i]] - values[without]))
    return phi


def shapley_sampled(value_function, d, num_permutations, seed=0):
    """Monte-Carlo Shapley values from marginal contributions along random orderings."""
    if num_permutations < 1:
        raise ValueError("num_permutations must be at least 1")
    if d == 0:
        return np.zeros(0)
    rng = np.random.default_rng(check_seed(seed))
    total = np.zeros(d)
    per_chunk = max(1, _MASK_BATCH // ((d + 1) * d))
    done = 0
    while done < num_permutations:
        n = min(per_chunk, num_permutations - done)
        perms = np.stack([rng.permutation(d) for _ in range(n)])
        # rank[p, i] = position of feature i in ordering p
        rank = np.empty_like(perms)
        np.put_along_axis(rank, perms, np.arange(d)[None, :], axis=1)
        steps = np.arange(d + 1)
        masks = rank[:, None, :] < steps[None, :, None]  # (n, d+1, d)
        values = _evaluate(value_function, masks.reshape(-1, d)).reshape(n, d + 1)
        marginal = np.diff(values, axis=1)  # marginal[p, t] belongs to perms[p, t]
        np.add.at(total, perms.ravel(), marginal.ravel())
        done += n
    return total / num_permutations


def random_importance(d, seed=0):
    """I.i.d. uniform ``[0, 1)`` scores: the sanity-check baseline."""
    return np.random.default_rng(check_seed(seed)).random(int(d))
