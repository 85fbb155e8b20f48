"""End-to-end acceptance checks.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the session. The desk-scale
checks (6 to 9) train on a 10,000-image MNIST subsample and run the CLI
in-process, which takes tens of minutes on one core.
"""

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from normlime.baselines import (
    NoiseConfig,
    masking_value_function,
    shapley_exact,
    shapley_sampled,
    smoothgrad_sq,
    vargrad,
)
from normlime.cli import main
from normlime.datasets import load_mnist
from normlime.local_surrogate import PerturbationConfig, SurrogateConfig, explain_instance
from normlime.model import CallablePredictor, MLPClassifier, gradient_wrt_input
from normlime.salience import ExplanationSet, normlime, normlime_matrix_form, splime_l2

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist"
DESK_METHODS = ("normlime", "lime", "smoothgrad_sq", "vargrad", "random")


def naive_normlime(M):
    n, d = M.shape
    l1 = [sum(abs(M[j, k]) for k in range(d)) for j in range(n)]
    out = np.zeros(d)
    for i in range(d):
        total, count = 0.0, 0
        for j in range(n):
            if M[j, i] != 0:
                total += (abs(M[j, i]) / l1[j]) * abs(M[j, i])
                count += 1
        out[i] = total / count if count else 0.0
    return out


def min_preactivation(model, x):
    h, smallest = x, np.inf
    for W, b in zip(model.coefs_[:-1], model.intercepts_[:-1]):
        z = W @ h + b
        smallest = min(smallest, np.abs(z).min())
        h = np.maximum(z, 0)
    return smallest


def random_set(rng, labels=1):
    n, d = int(rng.integers(3, 21)), int(rng.integers(4, 51))
    M = rng.normal(size=(n, d)) * (rng.uniform(size=(n, d)) < rng.uniform(0.1, 0.9))
    M[np.arange(n), rng.integers(0, d, n)] = rng.normal(size=n) + 2.5
    return M, rng.integers(0, labels, n)


# -- 1 to 5: exactness against independent oracles ---------------------------

@pytest.mark.criterion(1, "aggregation oracle equivalence on 1,000 random sets")
def test_aggregation_oracles(record_property):
    rng = np.random.default_rng(2024)
    sets = [random_set(rng) for _ in range(1000)]
    start = time.perf_counter()
    ours = [(normlime(ExplanationSet.from_matrix(M, y)).scores,
             normlime_matrix_form(ExplanationSet.from_matrix(M, y)).scores,
             splime_l2(ExplanationSet.from_matrix(M, y)).scores) for M, y in sets]
    elapsed = time.perf_counter() - start
    worst = 0.0
    for (M, _), (loop, matrix, sp) in zip(sets, ours):
        oracle = naive_normlime(M)
        norms = np.array([np.sqrt(sum(v * v for v in M[:, i])) for i in range(M.shape[1])])
        worst = max(worst, np.abs(loop - oracle).max(), np.abs(matrix - oracle).max(),
                    np.abs(sp - norms).max())
    record_property("detail", f"max abs diff {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-12
    assert elapsed < 10


@pytest.mark.criterion(2, "partition law on 100 multi-class sets")
def test_partition_law(record_property):
    from normlime.salience import partition_by_label

    rng = np.random.default_rng(7)
    for _ in range(100):
        M, labels = random_set(rng, labels=int(rng.integers(2, 10)))
        eset = ExplanationSet.from_matrix(M, labels)
        parts = [partition_by_label(eset, y) for y in np.unique(labels)]
        ids = [e.anchor_id for p in parts for e in p.explanations]
        assert sorted(ids) == list(range(len(M)))
        for i in range(M.shape[1]):
            assert sum(len(p.usage(i)) for p in parts) == len(eset.usage(i))
    record_property("detail", "100/100 sets")


def linear_trials(seed=3, trials=50):
    """Explanations of 50 random globally linear classifiers, as JSON text."""
    rng = np.random.default_rng(seed)
    out, checks = [], []
    for t in range(trials):
        d = int(rng.integers(10, 51))
        k = int(rng.integers(1, 11))
        support = np.sort(rng.choice(d, k, replace=False))
        w = np.zeros(d)
        w[support] = rng.uniform(0.005, 0.02, k) * rng.choice([-1, 1], k)

        def proba(X, w=w):
            p = X @ w + 0.5
            return np.column_stack([1 - p, p])

        model = CallablePredictor(proba, d, 2)
        expl = explain_instance(rng.uniform(size=d), model, PerturbationConfig(seed=t),
                                SurrogateConfig(k=k, lasso_lambda=1e-12), target_class=1,
                                anchor_id=t)
        out.append(expl.to_dict())
        checks.append((support, w[support], expl))
    return json.dumps(out), checks


@pytest.mark.criterion(3, "linear-model exactness over 50 trials")
def test_linear_model_exactness(record_property, tmp_path_factory):
    text, checks = linear_trials()
    (tmp_path_factory.getbasetemp() / "criterion3.json").write_text(text)
    exact = sum(e.indices.tolist() == s.tolist() for s, _, e in checks)
    err = max(np.abs(e.values - v).max() for s, v, e in checks if e.indices.size == s.size)
    record_property("detail", f"support exact {exact}/50, max coef error {err:.1e}")
    assert exact == 50
    assert err <= 1e-3


@pytest.mark.criterion(4, "analytic gradient baselines")
def test_gradient_baselines(record_property):
    rng = np.random.default_rng(11)
    for _ in range(20):
        d, c = int(rng.integers(2, 30)), int(rng.integers(2, 6))
        model = MLPClassifier.from_weights([rng.normal(size=(c, d))], [rng.normal(size=c)])
        x, k = rng.uniform(size=d), int(rng.integers(c))
        ncfg = NoiseConfig(0.3, int(rng.integers(2, 101)), int(rng.integers(1000)))
        assert np.all(vargrad(model, x, k, ncfg) == 0)
        assert np.all(smoothgrad_sq(model, x, k, ncfg) == model.coefs_[0][k] ** 2)
    worst = 0.0
    for _ in range(100):
        sizes = [int(rng.integers(2, 9)) for _ in range(4)]
        coefs = [rng.normal(size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        model = MLPClassifier.from_weights(coefs, [rng.normal(size=o) * 0.5 for o in sizes[1:]])
        x, k = rng.normal(size=sizes[0]), int(rng.integers(sizes[-1]))
        while min_preactivation(model, x) < 1e-2:
            # central differences are meaningless across a relu kink
            x = rng.normal(size=sizes[0])
        g = gradient_wrt_input(model, x, k)
        num = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = 1e-4
            num[i] = (model.decision_function(x + e)[0, k]
                      - model.decision_function(x - e)[0, k]) / 2e-4
        worst = max(worst, (np.abs(g - num) / (1 + np.abs(g))).max())
    record_property("detail", f"max relative finite-difference gap {worst:.1e}")
    assert worst <= 1e-4


@pytest.mark.criterion(5, "Shapley axioms and sampled accuracy")
def test_shapley(record_property):
    rng = np.random.default_rng(5)
    for d in range(1, 11):
        table = rng.normal(size=1 << d)
        bits = 1 << np.arange(d)

        def v(m, table=table, bits=bits):
            return table[(np.asarray(m) * bits).sum(axis=1)]

        full, empty = table[-1], table[0]
        assert abs(shapley_exact(v, d).sum() - (full - empty)) <= 1e-10
        a = rng.normal(size=d)
        np.testing.assert_allclose(shapley_exact(lambda m, a=a: np.asarray(m) @ a, d), a,
                                   rtol=0, atol=1e-12)
    worst = 0.0
    for trial in range(5):
        d = int(rng.integers(6, 11))
        model = MLPClassifier.from_weights([rng.normal(size=(12, d)), rng.normal(size=(4, 12))],
                                           [rng.normal(size=12) * 0.3, np.zeros(4)])
        v = masking_value_function(model, rng.uniform(size=d), np.full(d, 0.5), 1)
        exact = shapley_exact(v, d)
        approx = shapley_sampled(v, d, 5000, seed=trial)
        worst = max(worst, np.abs(approx - exact).max() / np.abs(exact).max())
    record_property("detail", f"sampled max error {100 * worst:.2f}% of max|phi|")
    assert worst <= 0.05


# -- 6 to 9: desk-scale MNIST through the command line ------------------------

def desk_pipeline(out):
    """Train the desk model and run the input-space KAR grid into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    data = ["--data-dir", str(MNIST_DIR), "--seed", "0"]
    assert main(["train", *data, "--model", str(out / "desk.nlkm"), "--out-dir", str(out)]) == 0
    assert main(["kar", *data, "--model", str(out / "desk.nlkm"), "--methods",
                 ",".join(DESK_METHODS), "--runs", "5", "--out-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    if not MNIST_DIR.exists():
        pytest.fail(f"MNIST files missing from {MNIST_DIR}")
    return desk_pipeline(tmp_path_factory.mktemp("desk"))


def mnist_subsets():
    from normlime._validation import derive_seed

    train = load_mnist(MNIST_DIR, "train").subsample(10_000, derive_seed(0, "subsample", "train"))
    test = load_mnist(MNIST_DIR, "test").subsample(2_000, derive_seed(0, "subsample", "test"))
    return train, test


@pytest.mark.criterion(6, "desk-scale KAR orderings at 50% removal")
def test_desk_kar(desk, record_property):
    from normlime.model import load_model

    _, test = mnist_subsets()
    acc = load_model(desk / "desk.nlkm").score(test.X, test.y)
    cells = {(c["method"], c["threshold"]): c
             for c in json.loads((desk / "kar.json").read_text())["cells"]}
    rows = list(csv.DictReader((desk / "kar.csv").read_text().splitlines()))
    assert len(rows) == len(DESK_METHODS) * 9 * 5
    half = {m: cells[(m, 0.5)] for m in DESK_METHODS}
    nl, rnd = half["normlime"], half["random"]
    pooled = np.sqrt((nl["std"] ** 2 + rnd["std"] ** 2) / 2)
    gains = ", ".join(f"{m} {100 * c['mean']:+.2f}" for m, c in half.items())
    record_property("detail", f"test accuracy {acc:.4f}; 50% gains (pp): {gains}; "
                              f"pooled std {100 * pooled:.2f}")
    assert acc >= 0.95
    assert nl["mean"] <= rnd["mean"] - pooled
    for m in ("smoothgrad_sq", "vargrad"):
        assert nl["mean"] <= half[m]["mean"]


@pytest.mark.criterion(7, "hidden-feature KAR at 30% removal")
def test_hidden_kar(desk, tmp_path, record_property):
    assert main(["kar", "--data-dir", str(MNIST_DIR), "--seed", "0", "--model",
                 str(desk / "desk.nlkm"), "--methods", "normlime", "--feature-space",
                 "hidden", "--layer", "0", "--thresholds", "0.3", "--runs", "5",
                 "--out-dir", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "kar.csv").read_text().splitlines()))
    base = np.mean([1 - float(r["baseline_error"]) for r in rows])
    retrained = np.mean([1 - float(r["retrained_error"]) for r in rows])
    record_property("detail", f"baseline accuracy {100 * base:.2f}%, "
                              f"retrained {100 * retrained:.2f}%")
    assert len(rows) == 5
    assert retrained >= base - 0.003


@pytest.mark.criterion(8, "bit-identical reruns of criteria 3 and 6")
def test_determinism(desk, tmp_path_factory, record_property):
    first = (tmp_path_factory.getbasetemp() / "criterion3.json")
    text, _ = linear_trials()
    assert first.exists() and first.read_text() == text
    again = desk_pipeline(tmp_path_factory.mktemp("desk_rerun"))
    names = ("desk.nlkm", "kar.csv", "kar.json", "kar_maps.json")
    same = [n for n in names if (desk / n).read_bytes() == (again / n).read_bytes()]
    record_property("detail", f"identical: criterion3.json, {', '.join(same)}")
    assert same == list(names)


@pytest.mark.criterion(9, "class-salience images stay on the digits")
def test_class_salience_images(desk, tmp_path, record_property):
    from normlime.images import read_pgm
    from scipy.ndimage import binary_dilation

    assert main(["class-salience", "--data-dir", str(MNIST_DIR), "--seed", "0", "--model",
                 str(desk / "desk.nlkm"), "--method", "normlime", "--classes", "0..9",
                 "--out-dir", str(tmp_path)]) == 0
    maps = json.loads((tmp_path / "normlime_class_salience.json").read_text())
    train, _ = mnist_subsets()
    inside = []
    for y, smap in enumerate(maps):
        pixels, w, h = read_pgm(tmp_path / f"normlime_class{y}.pgm")
        assert (w, h) == (28, 28)
        mask = train.X[train.y == y].mean(axis=0).reshape(28, 28) >= 0.1
        rows, cols = np.nonzero(binary_dilation(mask, iterations=2))
        box = np.zeros((28, 28), bool)
        box[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = True
        scores = np.asarray(smap["scores"])
        top = np.lexsort((np.arange(784), -scores))[:40]
        inside.append(bool(box.ravel()[top].all()))
    record_property("detail", f"{sum(inside)}/10 classes inside "
                              f"(failing: {[y for y, ok in enumerate(inside) if not ok]})")
    assert sum(inside) >= 8
