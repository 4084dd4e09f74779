import numpy as np
import pytest
from numpy.testing import assert_allclose

from qdnet import network
from qdnet.features import pauli_kernel
from qdnet.network import (
    Metrics,
    Model,
    ModelConfig,
    TrainingDivergedError,
    evaluate,
    load_checkpoint,
    loss_bce,
    lr_for_epoch,
    save_checkpoint,
    split_indices,
    train,
)
from qdnet.states import generate_dataset, sample_random_state, samples_to_arrays, to_pauli


def zero_model(config):
    """Model with zero dense weights and biases (kernels untouched)."""
    model = Model(config)
    for layer in model.layers:
        layer.w[...] = 0.0
        layer.b[...] = 0.0
    return model


def margin_toy(n, seed=0, scale=1.0):
    """Separable 1-feature toy: the sign of C_11 with a margin.

    Kernels are fixed so the single path (1, 1) reads out C_11 directly.
    """
    rng = np.random.default_rng(seed)
    coeffs = np.zeros((n, 4, 4))
    coeffs[:, 0, 0] = 1.0
    signs = rng.choice([-1.0, 1.0], n)
    coeffs[:, 1, 1] = signs * rng.uniform(0.2, 1.0, n) * scale
    labels = (signs > 0).astype(np.uint8)
    k = np.zeros((4, 4))
    k[0, 1] = 1.0
    return coeffs, labels, (k, k)


@pytest.fixture(scope="module")
def small_dataset():
    samples = generate_dataset(3000, 0.5, seed=77)
    return samples_to_arrays(samples)[:2]


class TestForward:
    def test_zero_network_outputs_half(self):
        model = zero_model(ModelConfig(path_count=4, hidden=(8, 8, 8)))
        assert model.forward(np.zeros(4)) == pytest.approx(0.5)
        assert model.forward(np.ones(4)) == pytest.approx(0.5)

    def test_inference_deterministic(self, rng):
        model = Model(ModelConfig(path_count=16, seed=3))
        x = rng.uniform(-1, 1, 16)
        assert model.forward(x) == model.forward(x)

    def test_sigmoid_saturation(self):
        config = ModelConfig(path_count=1, hidden=(), batchnorm=False)
        model = zero_model(config)
        model.layers[0].b[0] = 30.0
        assert model.forward(np.zeros(1)) > 1 - 1e-9
        model.layers[0].b[0] = -30.0
        assert model.forward(np.zeros(1)) < 1e-9

    def test_output_in_unit_interval(self, rng):
        model = Model(ModelConfig(path_count=16, seed=5))
        coeffs = np.stack([to_pauli(sample_random_state(rng)) for _ in range(64)])
        p = model.predict_proba(coeffs)
        assert np.all((p > 0) & (p < 1))


class TestLossBce:
    def test_half_prediction(self):
        assert loss_bce(np.array(0.5), np.array(1.0)) == pytest.approx(np.log(2))

    def test_perfect_prediction(self):
        assert loss_bce(np.array(1 - 1e-12), np.array(1.0)) == pytest.approx(0.0, abs=1e-10)

    def test_clamp_boundary(self):
        assert loss_bce(np.array(0.0), np.array(1.0)) == pytest.approx(-np.log(1e-12))


class TestBackward:
    def test_logistic_regression_identity(self, rng):
        # Single dense layer into the sigmoid: gradient is (p - y) x.
        config = ModelConfig(path_count=3, hidden=(), batchnorm=False,
                             kernels_trainable=False, seed=8)
        model = Model(config)
        x = rng.uniform(-1, 1, (1, 3))
        y = np.array([1.0])
        p, cache = model.forward_features(x, training=True)
        grads = model.backward(cache, y)
        assert_allclose(grads["w0"], (p - y)[:, None] * x, atol=1e-14)
        assert_allclose(grads["b0"], p - y, atol=1e-14)

    def test_frozen_kernels_zero_gradient(self, rng):
        config = ModelConfig(path_count=5, kernels_trainable=False, hidden=(16, 8, 4))
        model = Model(config)
        coeffs = np.stack([to_pauli(sample_random_state(rng)) for _ in range(8)])
        y = np.zeros(8)
        _, _, cache = model.batch_loss(coeffs, y, training=True)
        grads = model.backward(cache, y)
        assert np.all(grads["k1"] == 0.0)
        assert np.all(grads["k2"] == 0.0)

    @pytest.mark.parametrize("batchnorm", [True, False])
    def test_finite_difference_agreement(self, rng, batchnorm):
        config = ModelConfig(path_count=5, batchnorm=batchnorm, hidden=(24, 12, 6), seed=2)
        model = Model(config)
        coeffs = np.stack([to_pauli(sample_random_state(rng)) for _ in range(12)])
        y = rng.integers(0, 2, 12).astype(float)
        _, _, cache = model.batch_loss(coeffs, y, training=True)
        grads = model.backward(cache, y, coeffs)
        params = model.parameters()
        probe = np.random.default_rng(6)
        h = 1e-5
        for key, arr in params.items():
            flat = arr.ravel()
            for _ in range(5):
                i = probe.integers(len(flat))
                saved = flat[i]
                flat[i] = saved + h
                lp, _, _ = model.batch_loss(coeffs, y, training=True)
                flat[i] = saved - h
                lm, _, _ = model.batch_loss(coeffs, y, training=True)
                flat[i] = saved
                fd = (lp - lm) / (2 * h)
                an = grads[key].ravel()[i]
                if max(abs(fd), abs(an)) > 1e-6:
                    assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-4
                else:
                    assert abs(fd - an) < 1e-8


class TestTrain:
    def test_separable_toy_reaches_full_accuracy(self):
        coeffs, labels, kernels = margin_toy(1024, seed=4)
        config = ModelConfig(
            path_count=1, kernels_trainable=False, fixed_kernels=kernels,
            epochs=20, batch_size=128, learning_rate=0.01, seed=4, hidden=(32, 16, 8),
        )
        model, history = train(config, (coeffs[:768], labels[:768]), (coeffs[768:], labels[768:]))
        metrics = evaluate(model, (coeffs[:768], labels[:768]))
        assert metrics.accuracy == 1.0
        assert any(h["train_acc"] == 1.0 for h in history)

    def test_lr_halves_every_period(self):
        coeffs, labels, kernels = margin_toy(128)
        config = ModelConfig(
            path_count=1, kernels_trainable=False, fixed_kernels=kernels,
            epochs=13, batch_size=64, seed=0, hidden=(8, 4, 2),
        )
        _, history = train(config, (coeffs[:96], labels[:96]), (coeffs[96:], labels[96:]))
        assert history[6]["lr"] == 0.5 * history[0]["lr"]
        assert history[12]["lr"] == 0.25 * history[0]["lr"]

    def test_lr_schedule_exact(self):
        config = ModelConfig(learning_rate=0.8, lr_halving_period=6)
        for epoch in range(40):
            assert lr_for_epoch(config, epoch) == 0.8 * 0.5 ** (epoch // 6)

    def test_same_seed_same_first_epoch(self, small_dataset):
        coeffs, labels = small_dataset
        config = ModelConfig(path_count=4, epochs=1, seed=11, hidden=(32, 16, 8))
        _, h1 = train(config, (coeffs[:2000], labels[:2000]), (coeffs[2000:], labels[2000:]))
        _, h2 = train(config, (coeffs[:2000], labels[:2000]), (coeffs[2000:], labels[2000:]))
        assert h1[0]["train_loss"] == h2[0]["train_loss"]
        assert h1[0]["val_acc"] == h2[0]["val_acc"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_training_aborts(self):
        coeffs, labels, kernels = margin_toy(256)
        config = ModelConfig(
            path_count=1, kernels_trainable=False, fixed_kernels=kernels,
            epochs=3, batch_size=32, learning_rate=np.inf, seed=0, hidden=(8, 4, 2),
        )
        with pytest.raises(TrainingDivergedError) as info:
            train(config, (coeffs[:192], labels[:192]), (coeffs[192:], labels[192:]))
        assert isinstance(info.value.history, list)

    def test_empty_sets_rejected(self):
        coeffs, labels, _ = margin_toy(16)
        config = ModelConfig(path_count=1)
        with pytest.raises(ValueError):
            train(config, (coeffs[:0], labels[:0]), (coeffs, labels))

    def test_trainable_kernels_move(self, small_dataset):
        coeffs, labels = small_dataset
        config = ModelConfig(path_count=4, epochs=1, seed=11, hidden=(16, 8, 4))
        model, _ = train(config, (coeffs[:2000], labels[:2000]), (coeffs[2000:], labels[2000:]))
        fresh = Model(config)
        assert not np.array_equal(model.k1, fresh.k1)


class TestEvaluate:
    def test_perfect_predictions(self):
        # Hand-built margin classifier: sigmoid(100 * feature) nails the toy.
        coeffs, labels, kernels = margin_toy(512, seed=1)
        config = ModelConfig(
            path_count=1, kernels_trainable=False, fixed_kernels=kernels,
            hidden=(), batchnorm=False,
        )
        model = zero_model(config)
        model.layers[0].w[0, 0] = 100.0
        m = evaluate(model, (coeffs, labels))
        assert m.accuracy == 1.0
        assert m.fp == 0 and m.fn == 0 and m.recall == 1.0 and m.f1 == 1.0

    def test_swapped_labels_complement_accuracy(self):
        coeffs, labels, kernels = margin_toy(512, seed=2)
        config = ModelConfig(
            path_count=1, kernels_trainable=False, fixed_kernels=kernels,
            hidden=(), batchnorm=False, seed=6,
        )
        model = Model(config)
        m = evaluate(model, (coeffs, labels))
        m_swapped = evaluate(model, (coeffs, 1 - labels))
        assert m_swapped.accuracy == pytest.approx(1.0 - m.accuracy)

    def test_constant_half_predicts_discordant(self):
        model = zero_model(ModelConfig(path_count=2, hidden=(4, 4, 4)))
        coeffs = np.zeros((10, 4, 4))
        coeffs[:, 0, 0] = 1.0
        labels = np.array([0, 1] * 5, dtype=np.uint8)
        m = evaluate(model, (coeffs, labels))
        assert m.accuracy == 0.5
        assert m.tn == 0 and m.fn == 0  # p = 0.5 lands on class 1

    def test_permutation_invariance(self, rng, small_dataset):
        coeffs, labels = small_dataset
        model = Model(ModelConfig(path_count=16, seed=9))
        base = evaluate(model, (coeffs, labels))
        perm = rng.permutation(len(labels))
        shuffled = evaluate(model, (coeffs[perm], labels[perm]))
        assert base == shuffled

    def test_counts_sum_to_dataset_size(self, small_dataset):
        coeffs, labels = small_dataset
        model = Model(ModelConfig(path_count=16, seed=9))
        m = evaluate(model, (coeffs, labels))
        assert m.tp + m.fp + m.tn + m.fn == len(labels)


class TestSplit:
    def test_fractions_and_disjointness(self):
        tr, va, te = split_indices(1000, seed=5)
        assert len(tr) == 700 and len(va) == 100 and len(te) == 200
        assert len(set(tr) | set(va) | set(te)) == 1000

    def test_deterministic(self):
        a = split_indices(500, seed=3)
        b = split_indices(500, seed=3)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestCheckpoint:
    def test_round_trip_reproduces_metrics(self, tmp_path, small_dataset):
        coeffs, labels = small_dataset
        config = ModelConfig(path_count=8, epochs=2, seed=21, hidden=(32, 16, 8))
        train_set = (coeffs[:2000], labels[:2000])
        val_set = (coeffs[2000:2500], labels[2000:2500])
        model, history = train(config, train_set, val_set)
        val_metrics = evaluate(model, val_set)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, metadata={"val_metrics": val_metrics.to_dict()})
        loaded, metadata = load_checkpoint(path)
        again = evaluate(loaded, val_set)
        assert again.to_dict() == metadata["val_metrics"]
        assert loaded.config == model.config

    def test_arrays_preserved_exactly(self, tmp_path):
        model = Model(ModelConfig(path_count=5, seed=3, hidden=(16, 8, 4)))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(loaded.k1, model.k1)
        assert np.array_equal(loaded.k2, model.k2)
        for la, lb in zip(model.layers, loaded.layers):
            assert np.array_equal(la.w, lb.w)
            assert np.array_equal(la.b, lb.b)
            if la.has_batchnorm:
                assert np.array_equal(la.run_mean, lb.run_mean)
                assert np.array_equal(la.run_var, lb.run_var)

    def test_predictions_identical_after_reload(self, tmp_path, rng):
        model = Model(ModelConfig(path_count=16, seed=13))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        coeffs = np.stack([to_pauli(sample_random_state(rng)) for _ in range(32)])
        assert np.array_equal(model.predict_proba(coeffs), loaded.predict_proba(coeffs))


class TestInformationMonotonicity:
    def test_full_tomography_beats_subset(self):
        # Fixed conjugated-Pauli kernels: 16 paths read out all of C, the
        # first 8 paths a strict subset. Same head, data and seeds. Needs
        # enough data for the extra features to pay off, hence the size.
        samples = generate_dataset(12_000, 0.5, seed=77)
        coeffs, labels, _ = samples_to_arrays(samples)
        pk = np.eye(4)
        train_set = (coeffs[:9000], labels[:9000])
        val_set = (coeffs[9000:10_000], labels[9000:10_000])
        test_set = (coeffs[10_000:], labels[10_000:])
        accs = {}
        for l in (16, 8):
            config = ModelConfig(
                path_count=l, kernels_trainable=False, fixed_kernels=(pk, pk),
                epochs=15, seed=31,
            )
            model, _ = train(config, train_set, val_set)
            accs[l] = evaluate(model, test_set).accuracy
        assert accs[16] >= accs[8]
