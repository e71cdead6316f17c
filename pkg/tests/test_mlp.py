import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdepth.data import gaussian_blobs, inject_label_noise, make_split
from pdepth.mlp import (MlpModel, _forward_cache, TrainConfig, TrainingDiverged, backward, checkpoint_steps, forward,
                        forward_with_embeddings, init_model, input_gradient, logit_input_jacobian,
                        loss_cross_entropy, loss_zero_hinge, predict, train)


def random_net(rng, widths, dtype=np.float64):
    return init_model(widths, int(rng.integers(2**31)), dtype=dtype)


def numeric_grad(f, theta, h_scale, pattern=None):
    """Central differences with h = h_scale * (1 + |theta|).

    When ``pattern`` is given, also returns a mask of coordinates whose
    +/- h evaluations see a different activation pattern (a kink was crossed).
    """
    g = np.zeros(theta.shape, dtype=np.float64)
    kink = np.zeros(theta.shape, dtype=bool)
    flat = theta.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        h = h_scale * (1 + abs(float(old)))
        flat[i] = old + h
        up, pu = f(), pattern() if pattern else None
        flat[i] = old - h
        down, pd = f(), pattern() if pattern else None
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
        if pattern:
            kink.reshape(-1)[i] = not np.array_equal(pu, pd)
    return (g, kink) if pattern else g


def activation_pattern(model, x, y, loss):
    pre, _ = _forward_cache(model, x)
    signs = [p > 0 for p in pre[:-1]]
    if loss == "zero_hinge":
        z = pre[-1]
        signs.append(z > z[np.arange(len(y)), y][:, None])
    return np.concatenate([s.ravel() for s in signs])


class TestInit:
    def test_deterministic(self):
        a, b = init_model((4, 8, 3), 5), init_model((4, 8, 3), 5)
        assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_zero_biases_and_range(self):
        m = init_model((10, 20, 3), 1)
        assert all(np.all(b == 0) for b in m.biases)
        assert np.abs(m.weights[0]).max() <= math.sqrt(6 / 10)
        assert m.weights[0].dtype == np.float32

    @pytest.mark.parametrize("widths", [(3,), (3, 0, 2), ()])
    def test_invalid_widths(self, widths):
        with pytest.raises(ValueError):
            init_model(widths, 0)

    def test_untrained_accuracy_near_chance(self):
        ds = gaussian_blobs(10, 200, 16, 3.0, 1.0, 0)
        m = init_model((16, 128, 128, 128, 128, 10), 0)
        assert abs(np.mean(predict(m, ds.examples) == ds.labels) - 0.1) <= 0.05


class TestForward:
    def test_zero_network_uniform_softmax(self):
        m = MlpModel((3, 4, 5), [np.zeros((3, 4), np.float32), np.zeros((4, 5), np.float32)],
                     [np.zeros(4, np.float32), np.zeros(5, np.float32)])
        logits, probes = forward_with_embeddings(m, np.ones((2, 3)))
        assert np.all(logits == 0)
        np.testing.assert_allclose(probes[-1], 0.2)

    def test_identity_layer_probe(self):
        x = np.array([[1.0, -2.0, 3.0]], dtype=np.float32)
        m = MlpModel((3, 3, 2), [np.eye(3, dtype=np.float32), np.ones((3, 2), np.float32)],
                     [np.zeros(3, np.float32), np.zeros(2, np.float32)])
        _, probes = forward_with_embeddings(m, x)
        assert np.array_equal(probes[0], x)
        assert np.array_equal(probes[1], x)

    def test_softmax_rows_sum_to_one(self, rng):
        m = init_model((5, 16, 16, 4), 3)
        _, probes = forward_with_embeddings(m, rng.normal(size=(50, 5)) * 10)
        assert len(probes) == 4
        np.testing.assert_allclose(probes[-1].sum(axis=1), 1.0, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_model((3, 2), 0), np.zeros((1, 4)))

    def test_argmax_ties_lowest(self):
        m = MlpModel((1, 3), [np.zeros((1, 3), np.float32)], [np.array([1, 1, 0], np.float32)])
        assert predict(m, np.zeros((1, 1))).tolist() == [0]


class TestLosses:
    def test_zero_hinge_values(self):
        assert loss_zero_hinge([2, 1, 0], 0) == 0
        assert loss_zero_hinge([1, 2, 0], 0) == 1

    @pytest.mark.parametrize("n", [2, 5, 10])
    def test_ce_uniform(self, n):
        assert loss_cross_entropy(np.full(n, 0.3), 1) == pytest.approx(math.log(n), abs=1e-12)

    def test_non_finite_logits(self):
        with pytest.raises(FloatingPointError):
            loss_cross_entropy([np.nan, 0.0], 0)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.data())
    def test_hinge_zero_iff_label_dominates(self, z, data):
        i = data.draw(st.integers(0, len(z) - 1))
        assert (loss_zero_hinge(z, i) == 0) == (z[i] >= max(z))


class TestBackward:
    def test_linear_squared_logit_closed_form(self, rng):
        # backprop of 0.5*||z - t||^2 for z = x W + b is x^T (z - t)
        from pdepth.mlp import backprop

        m = random_net(rng, (4, 3))
        x = rng.normal(size=(1, 4))
        t = rng.normal(size=(1, 3))
        z = forward(m, x)
        gw, gb, _ = backprop(m, x, z - t)
        np.testing.assert_allclose(gw[0], x.T @ (z - t), rtol=1e-6)
        np.testing.assert_allclose(gb[0], (z - t)[0], rtol=1e-6)

    @pytest.mark.parametrize("loss", ["cross_entropy", "zero_hinge"])
    @pytest.mark.parametrize("dtype,rtol,h", [(np.float64, 1e-6, 1e-6), (np.float32, 1e-3, 1e-3)])
    def test_finite_differences(self, loss, dtype, rtol, h):
        rng = np.random.default_rng(7)
        checked = skipped = 0
        for _ in range(20):
            m = random_net(rng, (3, 5, 4, 3), dtype=dtype)
            x = rng.normal(size=(4, 3)).astype(dtype)
            y = rng.integers(0, 3, size=4)
            _, gw, gb = backward(m, x, y, loss)
            grads = [v for pair in zip(gw, gb) for v in pair]
            ref = m.astype(np.float64)  # differences taken in 64-bit on the same parameter values
            x64 = x.astype(np.float64)
            for p, g in zip(ref.parameters(), grads):
                num, kink = numeric_grad(lambda: backward(ref, x64, y, loss)[0], p, h,
                                         lambda: activation_pattern(ref, x64, y, loss))
                np.testing.assert_allclose(g[~kink], num[~kink], rtol=rtol, atol=rtol * 1e-2)
                checked += int((~kink).sum())
                skipped += int(kink.sum())
        assert checked > 20 * skipped
    def test_hinge_flat_region_exact_zero(self, rng):
        m = random_net(rng, (3, 6, 3), dtype=np.float32)
        x = rng.normal(size=(8, 3)).astype(np.float32)
        y = predict(m, x)
        value, gw, gb = backward(m, x, y, "zero_hinge")
        assert value == 0.0
        assert all(np.all(g == 0) for g in gw + gb)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            backward(init_model((2, 2), 0), np.zeros((0, 2)), [], "cross_entropy")


class TestInputGradient:
    def test_affine_rows(self, rng):
        m = random_net(rng, (5, 4))
        g = input_gradient(m, rng.normal(size=5), (1, 3))
        np.testing.assert_array_equal(g, m.weights[0][:, 1] - m.weights[0][:, 3])

    def test_same_class_rejected(self):
        with pytest.raises(ValueError):
            input_gradient(init_model((2, 2), 0), np.zeros(2), (1, 1))

    def test_finite_differences(self, rng):
        for _ in range(10):
            m = random_net(rng, (4, 8, 8, 3))
            x = rng.normal(size=4)
            g = input_gradient(m, x, (0, 2))
            f = lambda: float(np.diff(forward(m, x[None])[0][[2, 0]])[0])  # noqa: E731
            num = numeric_grad(f, x, 1e-6)
            np.testing.assert_allclose(g, num, rtol=1e-3, atol=1e-8)

    def test_jacobian_matches_pairs(self, rng):
        m = random_net(rng, (4, 8, 3))
        x = rng.normal(size=(3, 4))
        jac = logit_input_jacobian(m, x)
        np.testing.assert_allclose(jac[:, 0] - jac[:, 1], input_gradient(m, x, (0, 1)), rtol=1e-12)


class TestTrain:
    @pytest.fixture(scope="class")
    @staticmethod
    def blobs():
        ds = gaussian_blobs(3, 200, 8, 5.0, 1.0, 0)
        return ds, make_split(ds.n, 0.1, 0)

    def test_zero_steps_identity(self, blobs):
        ds, sp = blobs
        m0 = init_model((8, 16, 3), 1)
        m, log_, trace = train(m0, ds, sp, TrainConfig(total_steps=0))
        assert all(np.array_equal(p, q) for p, q in zip(m.parameters(), m0.parameters()))
        assert log_.steps.tolist() == [0]
        assert len(trace) == 3

    @pytest.mark.parametrize("opt", ["sgd", "full_batch_gd"])
    def test_zero_learning_rate(self, blobs, opt):
        ds, sp = blobs
        m0 = init_model((8, 16, 3), 1)
        m, _, _ = train(m0, ds, sp, TrainConfig(optimizer=opt, learning_rate=0.0, total_steps=7, log_every=3))
        assert all(np.array_equal(p, q) for p, q in zip(m.parameters(), m0.parameters()))

    def test_reference_accuracy(self, blobs):
        ds, _ = blobs
        sp = make_split(ds.n, 0.0, 0)
        m, log_, _ = train(init_model((8, 128, 128, 128, 128, 3), 0), ds, sp, TrainConfig())
        assert np.mean(predict(m, ds.examples) == ds.labels) >= 0.95
        assert np.array_equal(log_.final_predictions, predict(m, ds.examples))

    def test_deterministic(self, blobs):
        ds, sp = blobs
        cfg = TrainConfig(total_steps=30, log_every=7, batch_size=32, seed=3)
        a = train(init_model((8, 16, 3), 2), ds, sp, cfg)
        b = train(init_model((8, 16, 3), 2), ds, sp, cfg)
        assert all(np.array_equal(p, q) for p, q in zip(a[0].parameters(), b[0].parameters()))
        assert np.array_equal(a[1].predictions, b[1].predictions)

    def test_checkpoints(self):
        cfg = TrainConfig(total_steps=25, log_every=10)
        assert list(checkpoint_steps(cfg)) == [0, 10, 20, 25]

    def test_schedule(self):
        cfg = TrainConfig(learning_rate=1.0, schedule=(10, 20), total_steps=30)
        assert [cfg.lr_at(s) for s in (0, 9, 10, 19, 20)] == pytest.approx([1, 1, 0.2, 0.2, 0.04])

    @pytest.mark.parametrize("kw", [dict(schedule=(5, 5)), dict(schedule=(50,), total_steps=10),
                                    dict(momentum=1.0), dict(loss="mse"), dict(learning_rate=-1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_divergence_reported(self, blobs):
        ds, sp = blobs
        with pytest.raises(TrainingDiverged) as info:
            train(init_model((8, 16, 3), 1), ds, sp, TrainConfig(learning_rate=1e30, total_steps=50))
        assert info.value.step >= 0

    def test_curves_decompose_noise(self):
        ds = inject_label_noise(gaussian_blobs(3, 50, 4, seed=3), 0.4, 1)
        sp = make_split(ds.n, 0.2, 0)
        _, log_, _ = train(init_model((4, 16, 3), 0), ds, sp, TrainConfig(total_steps=20, log_every=5,
                                                                             batch_size=32))
        curves = log_.curves
        assert set(curves) == {"loss", "clean_train", "noisy_train", "noisy_original", "validation"}
        # noisy labels differ from originals everywhere, so both scores cannot exceed 0.5
        both = (np.asarray(curves["noisy_train"]) > 0.5) & (np.asarray(curves["noisy_original"]) > 0.5)
        assert not both.any()
