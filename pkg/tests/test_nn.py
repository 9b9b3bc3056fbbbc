import math

import numpy as np
import pytest

from gesturenet.nn import (SGD, LayerSpec, Network, ShapeError, canonical_layers, conv2d_forward,
                           fc_forward, load_float_model, maxpool_forward, model_bytes,
                           save_float_model, sgd_step, softmax, softmax_cross_entropy,
                           xavier_bound, xavier_init)
from oracles import finite_difference_errors, gradient_check_input, reduced_network

CANONICAL_TRACE = [(50, 50, 1), (46, 46, 50), (23, 23, 50), (21, 21, 20), (7, 7, 20), (50,), (10,)]


def naive_conv(x, w, b):
    h, wd, _ = x.shape
    k, kh, kw, _ = w.shape
    out = np.zeros((h - kh + 1, wd - kw + 1, k))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for o in range(k):
                out[i, j, o] = np.sum(x[i:i + kh, j:j + kw, :] * w[o]) + b[o]
    return out


class TestConv:
    def test_canonical_conv1_shape(self):
        out = conv2d_forward(np.zeros((50, 50, 1), np.float32), np.zeros((50, 5, 5, 1), np.float32),
                             np.zeros(50, np.float32))
        assert out.shape == (46, 46, 50)

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(0).random((9, 7, 3))
        out = conv2d_forward(x, np.zeros((2, 3, 3, 3)), np.array([1.5, -2.0]))
        assert np.all(out[..., 0] == 1.5) and np.all(out[..., 1] == -2.0)

    def test_hand_example(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        w = np.array([[1.0, -1.0], [-1.0, 1.0]])[None, ..., None]
        assert conv2d_forward(x, w, np.zeros(1)).ravel().tolist() == [0.0]

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(7, 6, 3)), rng.normal(size=(4, 3, 2, 3)), rng.normal(size=4)
        np.testing.assert_allclose(conv2d_forward(x, w, b), naive_conv(x, w, b), atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d_forward(np.zeros((5, 5, 2)), np.zeros((1, 3, 3, 1)), np.zeros(1))
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((2, 2, 1)), np.zeros((1, 3, 3, 1)), np.zeros(1))


class TestPoolAndDense:
    @pytest.mark.parametrize("shape,s,out", [((46, 46, 50), 2, (23, 23, 50)),
                                             ((21, 21, 20), 3, (7, 7, 20))])
    def test_pool_shapes(self, shape, s, out):
        assert maxpool_forward(np.zeros(shape, np.float32), s, s).shape == out

    def test_pool_constant(self):
        assert np.all(maxpool_forward(np.full((6, 6, 2), 3.5, np.float32), 2, 2) == 3.5)

    def test_pool_takes_window_max_per_channel(self):
        x = np.arange(16 * 2, dtype=np.float32).reshape(4, 4, 2)
        out = maxpool_forward(x, 2, 2)
        assert out[..., 0].tolist() == [[10, 14], [26, 30]]
        assert out[..., 1].tolist() == [[11, 15], [27, 31]]

    def test_pool_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            maxpool_forward(np.zeros((7, 7, 1), np.float32), 2, 2)

    def test_fc_shapes_identity_and_zero(self):
        assert fc_forward(np.zeros((7, 7, 20)), np.zeros((50, 980)), np.zeros(50)).shape == (50,)
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(fc_forward(v, np.eye(3), np.zeros(3)), v)
        b = np.array([0.5, 1.5])
        np.testing.assert_array_equal(fc_forward(np.zeros(4), np.ones((2, 4)), b), b)

    def test_fc_length_mismatch(self):
        with pytest.raises(ShapeError):
            fc_forward(np.zeros(5), np.zeros((2, 4)), np.zeros(2))


class TestSoftmax:
    def test_uniform(self):
        loss, p = softmax_cross_entropy(np.zeros(10), 3)
        np.testing.assert_allclose(p, 0.1, atol=1e-12)
        assert loss == pytest.approx(math.log(10), abs=1e-9)

    def test_large_logits_are_stable(self):
        loss, p = softmax_cross_entropy(np.array([1000.0] + [0.0] * 9), 0)
        assert np.isfinite(p).all() and loss == pytest.approx(0.0, abs=1e-12)

    def test_direct_formula(self):
        loss, p = softmax_cross_entropy(np.array([1.0, 2.0, 3.0]), 2)
        z = math.exp(1) + math.exp(2) + math.exp(3)
        assert loss == pytest.approx(-math.log(math.exp(3) / z), rel=1e-12)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(10), 10)

    def test_shift_invariance(self):
        z = np.random.default_rng(2).normal(size=10)
        np.testing.assert_allclose(softmax(z), softmax(z + 123.0), atol=1e-6)


class TestNetwork:
    def test_trace_and_counts(self):
        net = Network.canonical()
        assert net.shapes[0] == (50, 50, 1)
        trace = [net.shapes[0]] + [s for spec, s in zip(net.layers, net.shapes[1:])
                                   if spec.kind in ("conv", "maxpool", "fully_connected")]
        assert trace == CANONICAL_TRACE
        assert (net.n_weights, net.n_biases) == (59_750, 130)
        kinds = [s.kind for s in canonical_layers()]
        assert kinds == ["conv", "relu", "maxpool", "conv", "relu", "maxpool",
                         "fully_connected", "relu", "fully_connected", "softmax"]

    def test_probabilities_sum_to_one(self):
        net = xavier_init(Network.canonical(), 0)
        x = (np.random.default_rng(0).random((4, 50, 50)) > 0.5).astype(np.float32)
        p = net.forward(x)
        assert p.shape == (4, 10)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_net_is_uniform(self):
        p = Network.canonical().forward(np.zeros((50, 50)))
        np.testing.assert_allclose(p, 0.1, atol=1e-7)

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            Network.canonical().forward(np.zeros((49, 50, 1)))


class TestBackward:
    def test_finite_differences(self):
        net = reduced_network(0)
        x, labels = gradient_check_input(0)
        errors = finite_difference_errors(net, x, labels)
        assert len(errors) == 4
        assert max(errors.values()) < 1e-4, errors

    def test_bias_gradient_is_sum_of_upstream(self):
        net = reduced_network(3)
        x, labels = gradient_check_input(3)
        net.forward(x, train=True)
        g = np.random.default_rng(4).normal(size=(3, 3))
        grads = net.backward(labels, dlogits=g)
        np.testing.assert_allclose(grads[3][1], g.sum(axis=0))

    def test_zero_upstream_gives_zero_gradients(self):
        net = reduced_network(5)
        x, labels = gradient_check_input(5)
        net.forward(x, train=True)
        for g in net.backward(labels, dlogits=np.zeros((3, 3))):
            if g is not None:
                assert not np.any(g[0]) and not np.any(g[1])

    def test_requires_cached_forward(self):
        net = reduced_network(0)
        net.forward(np.zeros((8, 8, 1)))
        with pytest.raises(RuntimeError):
            net.backward([0])


class TestSGD:
    def test_vanilla_step(self):
        w, g = np.array([1.0, 2.0]), np.array([0.5, -1.0])
        SGD(lr=0.1, momentum=0.0).step([w], [g])
        np.testing.assert_array_equal(w, [1.0 - 0.05, 2.0 + 0.1])

    def test_zero_lr(self):
        w = np.array([1.0, 2.0])
        SGD(lr=0.0, momentum=0.9).step([w], [np.ones(2)])
        assert w.tolist() == [1.0, 2.0]

    def test_momentum_two_steps(self):
        w, g = np.zeros(1), np.array([2.0])
        opt = SGD(lr=0.1, momentum=0.9)
        opt.step([w], [g])
        opt.step([w], [g])
        assert w[0] == pytest.approx(-0.1 * 2.0 * (1 + 1.9))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            SGD().step([np.zeros(2)], [np.zeros(3)])

    def test_network_step(self):
        net = reduced_network(0)
        x, labels = gradient_check_input(0)
        before = net.loss(x, labels)
        opt = SGD(lr=0.1, momentum=0.0)
        for _ in range(5):
            net.forward(x, train=True)
            sgd_step(net, net.backward(labels), opt)
        assert net.loss(x, labels) < before


class TestXavier:
    def test_deterministic(self):
        a, b = xavier_init(Network.canonical(), 7), xavier_init(Network.canonical(), 7)
        for pa, pb in zip(a.params, b.params):
            if pa is not None:
                assert np.array_equal(pa[0], pb[0]) and not pa[1].any()

    def test_fc2_bound(self):
        spec = LayerSpec.fc(10, 50)
        assert xavier_bound(spec) == pytest.approx(math.sqrt(6 / 60))
        net = xavier_init(Network.canonical(), 1)
        assert np.abs(net.params[8][0]).max() <= xavier_bound(spec)

    def test_fc1_mean_within_three_sigma(self):
        w = xavier_init(Network.canonical(), 2).params[6][0].astype(np.float64)
        bound = xavier_bound(LayerSpec.fc(50, 980))
        sigma = bound / math.sqrt(3) / math.sqrt(w.size)
        assert w.size == 49_000 and abs(w.mean()) < 3 * sigma


class TestFileFormat:
    def test_round_trip_and_size(self, tmp_path):
        net = xavier_init(Network.canonical(), 3)
        path = tmp_path / "m.hgm"
        save_float_model(net, path)
        # magic + version + count + 10 * (tag + 4 u32) + float32 params
        assert model_bytes(path) == 4 + 1 + 1 + 10 * 17 + 4 * (59_750 + 130)
        data = path.read_bytes()
        assert data[:4] == b"HGRF" and data[4] == 1 and data[5] == 10
        back = load_float_model(path)
        assert back.layers == net.layers
        for pa, pb in zip(net.params, back.params):
            if pa is not None:
                assert np.array_equal(pa[0], pb[0]) and np.array_equal(pa[1], pb[1])

    def test_truncated_or_foreign_files_rejected(self, tmp_path):
        net = xavier_init(Network.canonical(), 3)
        path = tmp_path / "m.hgm"
        save_float_model(net, path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(ValueError):
            load_float_model(path)
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            load_float_model(path)


def test_one_epoch_is_bit_reproducible():
    from gesturenet.estimators import GestureNetClassifier
    rng = np.random.default_rng(0)
    X = (rng.random((20, 50, 50)) > 0.5).astype(np.float32)
    y = np.arange(20) % 10
    a = GestureNetClassifier(epochs=1, batch_size=8, random_state=4).fit(X, y)
    b = GestureNetClassifier(epochs=1, batch_size=8, random_state=4).fit(X, y)
    for pa, pb in zip(a.network_.params, b.network_.params):
        if pa is not None:
            assert np.array_equal(pa[0], pb[0]) and np.array_equal(pa[1], pb[1])
