import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcorr.datagen import Dataset, generate_blobs
from fedcorr.errors import DivergenceError, ParameterError
from fedcorr.model import (
    MLP, LocalTrainConfig, SoftmaxRegression, build_model, evaluate, forward, local_objective,
    local_train, mixup_batch, one_hot, per_sample_loss, softmax, weight_distance_sq,
)


def reference_mlp_forward(model, w, x):
    """Second, loop-based implementation of the MLP forward pass."""
    p = model.unflatten(w)
    out = []
    for row in x:
        h = [max(0.0, sum(row[i] * p["W1"][i, j] for i in range(model.input_dim)) + p["b1"][j])
             for j in range(model.hidden)]
        z = [sum(h[j] * p["W2"][j, c] for j in range(model.hidden)) + p["b2"][c] for c in range(model.n_classes)]
        m = max(z)
        e = [math.exp(v - m) for v in z]
        out.append([v / sum(e) for v in e])
    return np.array(out)


def blob_data(n=200, m=4, d=5, seed=0):
    ds = generate_blobs(n, m, d, 1.0, 3.0, seed=seed)
    return ds, np.arange(n)


class TestForward:
    def test_zero_weights_uniform(self):
        model = SoftmaxRegression(3, 4)
        assert np.allclose(forward(model, np.zeros(model.n_params), np.ones(3)), 0.25)

    def test_sums_to_one_and_shift_invariant(self):
        z = np.random.default_rng(0).normal(size=(6, 5)) * 30
        p = softmax(z)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(softmax(z + 123.0), p, atol=1e-12)

    def test_mlp_matches_reference(self):
        model = MLP(4, 3, hidden=6)
        w = model.init(0)
        x = np.random.default_rng(1).normal(size=(5, 4))
        assert np.max(np.abs(forward(model, w, x) - reference_mlp_forward(model, w, x))) <= 1e-12

    def test_dimension_mismatch(self):
        model = MLP(4, 3)
        with pytest.raises(ParameterError):
            forward(model, model.init(0), np.ones(5))

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            build_model("cnn", 3, 2)


class TestLossAndEvaluate:
    def _onehot_model(self, m=3):
        # W = 50 * I on one-hot inputs gives near-exact one-hot predictions
        model = SoftmaxRegression(m, m)
        w = np.concatenate([(50.0 * np.eye(m)).ravel(), np.zeros(m)])
        x = np.eye(m)
        return model, w, Dataset(x, np.arange(m), np.arange(m), m)

    def test_confident_correct_loss_near_zero(self):
        model, w, ds = self._onehot_model()
        assert np.all(per_sample_loss(model, w, ds, [0, 1, 2]) < 1e-20)
        assert evaluate(model, w, ds) == 1.0

    def test_always_wrong(self):
        model, w, ds = self._onehot_model()
        wrong = Dataset(ds.features, (np.arange(3) + 1) % 3, np.arange(3), 3)
        assert evaluate(model, w, wrong) == 0.0

    def test_uniform_loss_ln_m(self):
        model = SoftmaxRegression(2, 10)
        ds = Dataset(np.ones((3, 2)), [0, 4, 9], [0, 4, 9], 10)
        assert np.allclose(per_sample_loss(model, np.zeros(model.n_params), ds, [0, 1, 2]), math.log(10), atol=1e-12)

    def test_uniform_tie_break(self):
        model = SoftmaxRegression(2, 5)
        labels = np.arange(50) % 5
        ds = Dataset(np.ones((50, 2)), labels, labels, 5)
        assert evaluate(model, np.zeros(model.n_params), ds) == pytest.approx(0.2)

    def test_batch_equals_single(self):
        ds, idx = blob_data()
        model = MLP(5, 4, 8)
        w = model.init(3)
        batch = per_sample_loss(model, w, ds, idx[:30])
        single = np.array([per_sample_loss(model, w, ds, [i])[0] for i in idx[:30]])
        assert np.max(np.abs(batch - single)) <= 1e-12


class TestWeightDistance:
    def test_examples(self):
        assert weight_distance_sq([1.0, 2.0], [1.0, 2.0]) == 0
        assert weight_distance_sq([3.0, 4.0], [0.0, 0.0]) == 25

    def test_block_decomposition(self):
        model = MLP(4, 3, 5)
        a, b = model.init(0), model.init(1)
        blocks = sum(float(((model.unflatten(a)[k] - model.unflatten(b)[k]) ** 2).sum()) for k, _ in model.layout)
        assert weight_distance_sq(a, b) == pytest.approx(blocks, rel=1e-12)

    def test_layout_mismatch(self):
        with pytest.raises(ParameterError):
            weight_distance_sq(np.zeros(3), np.zeros(4))


class TestMixup:
    def test_lambda_one_identity(self):
        x = np.arange(8.0).reshape(4, 2)
        y = one_hot([0, 1, 2, 0], 3)
        mixed = mixup_batch(x, y, 1.0, seed=0, lam=1.0)
        assert np.array_equal(mixed.x, x) and np.array_equal(mixed.y, y)

    def test_midpoint(self):
        x = np.array([[0.0, 0.0], [2.0, 2.0]])
        y = one_hot([0, 1], 3)
        # find a seed whose permutation swaps the pair
        for seed in range(50):
            mixed = mixup_batch(x, y, 1.0, seed=seed, lam=0.5)
            if mixed.partners.tolist() == [1, 0]:
                break
        assert mixed.x[0].tolist() == [1.0, 1.0]
        assert mixed.y[0].tolist() == [0.5, 0.5, 0.0]

    def test_alpha_one_is_uniform(self):
        lam = mixup_batch(np.zeros((100_000, 1)), np.ones((100_000, 1)), 1.0, seed=0).lam
        assert abs(lam.mean() - 0.5) <= 0.01 and abs(lam.var() - 1 / 12) <= 0.01

    def test_alpha_nonpositive(self):
        with pytest.raises(ParameterError):
            mixup_batch(np.zeros((2, 1)), np.ones((2, 1)), 0.0)

    @given(st.integers(1, 30), st.floats(0.05, 5.0), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_mixed_labels_valid(self, n, alpha, seed):
        rng = np.random.default_rng(seed)
        y = one_hot(rng.integers(0, 4, size=n), 4)
        mixed = mixup_batch(rng.normal(size=(n, 2)), y, alpha, seed=seed)
        assert np.all((mixed.y >= 0) & (mixed.y <= 1))
        assert np.allclose(mixed.y.sum(axis=1), 1.0, atol=1e-9)


class TestGradients:
    @pytest.mark.parametrize("model", [SoftmaxRegression(5, 3), MLP(5, 3, 7)])
    def test_every_block(self, model):
        rng = np.random.default_rng(0)
        w = model.init(rng)
        anchor = w + rng.normal(scale=0.2, size=w.shape)
        x = rng.normal(size=(9, 5))
        y = one_hot(rng.integers(0, 3, size=9), 3)
        _, grad = local_objective(model, w, x, y, 2.0, anchor)
        offset = 0
        for name, shape in model.layout:
            size = int(np.prod(shape))
            for j in rng.choice(size, size=min(size, 5), replace=False) + offset:
                e = np.zeros_like(w)
                e[j] = 1e-5
                num = (local_objective(model, w + e, x, y, 2.0, anchor)[0]
                       - local_objective(model, w - e, x, y, 2.0, anchor)[0]) / 2e-5
                assert abs(num - grad[j]) <= 1e-4 * max(abs(num), abs(grad[j]), 1e-8), name
            offset += size

    def test_proximal_zero_at_anchor(self):
        model = MLP(5, 3, 4)
        w = model.init(0)
        x, y = np.ones((2, 5)), one_hot([0, 1], 3)
        loss_p, grad_p = local_objective(model, w, x, y, 3.0, w.copy())
        loss, grad = local_objective(model, w, x, y)
        assert loss_p == loss and np.array_equal(grad_p, grad)


class TestLocalTrain:
    def test_loss_decreases(self):
        ds, idx = blob_data()
        model = MLP(5, 4, 16)
        w0 = model.init(0)
        w = local_train(model, w0, ds, idx, LocalTrainConfig(seed=1))
        assert per_sample_loss(model, w, ds, idx).mean() < per_sample_loss(model, w0, ds, idx).mean()

    def test_deterministic(self):
        ds, idx = blob_data()
        model = MLP(5, 4, 8)
        cfg = LocalTrainConfig(mixup_alpha=1.0, prox_beta=5.0, prox_mu_hat=0.3, seed=7)
        a = local_train(model, model.init(0), ds, idx, cfg)
        b = local_train(model, model.init(0), ds, idx, cfg)
        assert np.array_equal(a, b)

    def test_zero_prox_coefficient_matches_plain(self):
        ds, idx = blob_data()
        model = MLP(5, 4, 8)
        w0 = model.init(0)
        anchor = w0 + 1.0
        a = local_train(model, w0, ds, idx, LocalTrainConfig(mixup_alpha=1.0, prox_beta=5.0, prox_mu_hat=0.0,
                                                             anchor_weights=anchor, seed=2))
        b = local_train(model, w0, ds, idx, LocalTrainConfig(mixup_alpha=1.0, seed=2))
        assert np.array_equal(a, b)

    def test_proximal_pull(self):
        ds, idx = blob_data()
        model = MLP(5, 4, 8)
        w0 = model.init(0)
        base = dict(learning_rate=0.01, mixup_alpha=1.0, anchor_weights=w0, seed=3)
        free = local_train(model, w0, ds, idx, LocalTrainConfig(prox_beta=0.0, **base))
        pulled = local_train(model, w0, ds, idx, LocalTrainConfig(prox_beta=5.0, prox_mu_hat=0.8, **base))
        assert weight_distance_sq(pulled, w0) <= weight_distance_sq(free, w0)

    def test_zero_epochs_is_identity(self):
        ds, idx = blob_data()
        model = SoftmaxRegression(5, 4)
        w0 = model.init(0)
        assert np.array_equal(local_train(model, w0, ds, idx, LocalTrainConfig(epochs=0)), w0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self):
        ds, idx = blob_data()
        ds.features *= 1e300
        model = SoftmaxRegression(5, 4)
        with pytest.raises(DivergenceError, match=r"non-finite loss at epoch \d+, batch \d+"):
            local_train(model, model.init(0), ds, idx, LocalTrainConfig(learning_rate=1e10))

    def test_empty_indices(self):
        ds, _ = blob_data()
        with pytest.raises(ParameterError):
            local_train(SoftmaxRegression(5, 4), np.zeros(24), ds, [], LocalTrainConfig())
