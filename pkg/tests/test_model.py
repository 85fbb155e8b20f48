import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from normlime.exceptions import (
    CapabilityError,
    DataError,
    DivergenceError,
    FormatError,
    InputShapeError,
    VersionError,
)
from normlime.model import (
    CallablePredictor,
    MLPClassifier,
    TrainConfig,
    capabilities,
    gradient_wrt_input,
    load_model,
    predict_proba,
    save_model,
    train,
)


def random_model(rng, sizes):
    coefs = [rng.normal(size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [rng.normal(size=o) * 0.5 for o in sizes[1:]]
    return MLPClassifier.from_weights(coefs, biases)


def zero_model(sizes):
    coefs = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    return MLPClassifier.from_weights(coefs, [np.zeros(o) for o in sizes[1:]])


def central_differences(f, x, h=1e-4):
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def gaussian_blobs(n=100, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.normal(size=(n, 2)) * 0.5 + np.where(y[:, None] == 0, -2.0, 2.0)
    return X, y


class TestPredictProba:
    def test_zero_weights_give_uniform(self):
        model = zero_model([5, 4, 3])
        p = predict_proba(model, np.arange(5.0))
        np.testing.assert_array_equal(p, np.full(3, 1 / 3))

    def test_identity_softmax_symmetric_point(self):
        model = MLPClassifier.from_weights([np.eye(2)], [np.zeros(2)])
        np.testing.assert_array_equal(predict_proba(model, [0.0, 0.0]), [0.5, 0.5])

    def test_dimension_mismatch(self):
        with pytest.raises(InputShapeError):
            predict_proba(zero_model([3, 2]), np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    def test_probability_simplex(self, seed, scale):
        rng = np.random.default_rng(seed)
        model = random_model(rng, [6, 5, 4])
        p = model.predict_proba(rng.normal(size=(8, 6)) * scale)
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


class TestGradient:
    def test_linear_model_returns_weight_row(self):
        W = np.array([[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]])
        model = MLPClassifier.from_weights([W], [np.zeros(2)])
        np.testing.assert_array_equal(gradient_wrt_input(model, [0.3, 0.1, 9.0], 1), W[1])

    def test_zero_model(self):
        g = gradient_wrt_input(zero_model([4, 3, 2]), np.ones(4), 0)
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            sizes = [int(rng.integers(2, 7)), int(rng.integers(2, 6)),
                     int(rng.integers(2, 6)), int(rng.integers(2, 5))]
            model = random_model(rng, sizes)
            x = rng.normal(size=sizes[0])
            c = int(rng.integers(sizes[-1]))
            analytic = gradient_wrt_input(model, x, c)
            numeric = central_differences(lambda v: model.decision_function(v)[0, c], x)
            assert np.all(np.abs(analytic - numeric) <= 1e-4 * (1 + np.abs(analytic)))

    def test_capability_error_for_probability_only_predictor(self):
        handle = CallablePredictor(lambda X: np.full((len(X), 2), 0.5), 3, 2)
        assert capabilities(handle) == {"probabilities"}
        with pytest.raises(CapabilityError):
            gradient_wrt_input(handle, np.zeros(3), 0)


class TestHiddenFeatures:
    def test_zero_model(self):
        h = zero_model([4, 3, 2]).hidden_features(np.ones((1, 4)), 0)
        np.testing.assert_array_equal(h, np.zeros((1, 3)))

    def test_last_hidden_layer_width(self):
        model = random_model(np.random.default_rng(0), [6, 5, 7, 3])
        assert model.hidden_features(np.ones((2, 6)), 1).shape == (2, 7)

    def test_identity_layer_passes_nonnegative_input(self):
        model = MLPClassifier.from_weights([np.eye(4), np.ones((2, 4))],
                                           [np.zeros(4), np.zeros(2)])
        x = np.array([[0.0, 0.5, 2.0, 3.25]])
        np.testing.assert_array_equal(model.hidden_features(x, 0), x)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            zero_model([4, 3, 2]).hidden_features(np.ones((1, 4)), 1)

    def test_head_composes_with_hidden_features(self):
        rng = np.random.default_rng(3)
        model = random_model(rng, [5, 6, 4, 3])
        X = rng.normal(size=(10, 5))
        head = model.head(0)
        np.testing.assert_allclose(head.predict_proba(model.hidden_features(X, 0)),
                                   model.predict_proba(X), rtol=1e-12)

    def test_head_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        head = random_model(rng, [5, 6, 4, 3]).head(0)
        h = rng.normal(size=6)
        analytic = head.input_gradient(h[None, :], 2)[0]
        numeric = central_differences(lambda v: head.decision_function(v)[0, 2], h)
        np.testing.assert_allclose(analytic, numeric, atol=1e-6)


class TestTraining:
    def test_separable_gaussians_fit_perfectly(self):
        X, y = gaussian_blobs()
        model = MLPClassifier(hidden_layer_sizes=(8,), epochs=50, batch_size=10,
                              learning_rate=0.1).fit(X, y)
        assert model.score(X, y) == 1.0
        assert model.loss(X, y) < model.initial_loss_

    def test_zero_epochs_keeps_weights(self):
        X, y = gaussian_blobs()
        start = random_model(np.random.default_rng(1), [2, 4, 2])
        out = train(start, X, y, TrainConfig(epochs=0))
        for a, b in zip(start.coefs_, out.coefs_):
            np.testing.assert_array_equal(a, b)

    def test_train_with_fixed_seed_is_bit_reproducible(self):
        X, y = gaussian_blobs(seed=3)
        cfg = TrainConfig(epochs=5, batch_size=16, learning_rate=0.05, seed=11)
        a = train(MLPClassifier(hidden_layer_sizes=(6, 5)), X, y, cfg)
        b = train(MLPClassifier(hidden_layer_sizes=(6, 5)), X, y, cfg)
        for Wa, Wb in zip(a.coefs_ + a.intercepts_, b.coefs_ + b.intercepts_):
            assert Wa.tobytes() == Wb.tobytes()

    def test_weight_shapes_chain(self):
        X, y = gaussian_blobs()
        model = MLPClassifier(hidden_layer_sizes=(7, 3), epochs=1).fit(X, y)
        assert [W.shape for W in model.coefs_] == [(7, 2), (3, 7), (2, 3)]

    def test_initialisation_bounds(self):
        model = MLPClassifier(hidden_layer_sizes=(30,), epochs=0, n_classes=3)
        model.fit(np.zeros((3, 20)), [0, 1, 2])
        limit = np.sqrt(6 / (20 + 30))
        assert np.abs(model.coefs_[0]).max() <= limit
        assert all(np.all(b == 0) for b in model.intercepts_)

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            MLPClassifier().fit(np.zeros((0, 3)), np.zeros(0, dtype=int))

    def test_divergence_reports_epoch(self):
        X, y = gaussian_blobs()
        with pytest.raises(DivergenceError) as info:
            MLPClassifier(hidden_layer_sizes=(8,), learning_rate=1e200, epochs=3).fit(X * 1e3, y)
        assert info.value.epoch == 0

    def test_hidden_mask_silences_units(self):
        X, y = gaussian_blobs()
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        model = MLPClassifier(hidden_layer_sizes=(4,), epochs=3, hidden_mask=(0, mask)).fit(X, y)
        h = model.hidden_features(X, 0)
        assert np.all(h[:, [1, 3]] == 0)

    def test_sklearn_clone_and_params(self):
        model = MLPClassifier(hidden_layer_sizes=(5,), seed=4)
        twin = clone(model)
        assert twin.get_params() == model.get_params()
        assert model.train_config == TrainConfig(seed=4)


class TestPersistence:
    def test_round_trip_is_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        model = random_model(rng, [7, 5, 4, 3])
        save_model(model, tmp_path / "m.nlkm")
        loaded = load_model(tmp_path / "m.nlkm")
        X = rng.normal(size=(10, 7))
        assert loaded.predict_proba(X).tobytes() == model.predict_proba(X).tobytes()

    def test_header_layout(self, tmp_path):
        save_model(zero_model([3, 2]), tmp_path / "m.nlkm")
        blob = (tmp_path / "m.nlkm").read_bytes()
        assert blob[:4] == b"NLKM"
        assert np.frombuffer(blob[4:20], dtype="<u4").tolist() == [1, 1, 3, 2]
        assert len(blob) == 20 + 8 * (6 + 2)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.nlkm"
        save_model(zero_model([3, 4, 2]), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.nlkm"
        save_model(zero_model([3, 2]), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_model(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.nlkm"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(FormatError):
            load_model(path)
