"""Forward oracles and 64-bit central finite-difference checks for every
differentiable op. Seeded inputs keep clear of ReLU kinks and pool ties."""

import numpy as np
import pytest

from conftest import numeric_gradient, relative_error
from sigmap import autograd as ag
from sigmap import nnkernels
from sigmap.autograd import Tensor

CONV_TOL = 1e-6
OTHER_TOL = 1e-4


def backprop_with_seed(out: Tensor, seed: np.ndarray):
    # reduce to a scalar sum(out * seed) by seeding the output gradient
    out._backward(seed)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = ag.conv2d(x, Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_kernel_interior(self):
        x = Tensor(np.full((1, 1, 6, 6), 3.0))
        out = ag.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.data[0, 0, 3, 3] == 27.0  # 9 * c on interior pixels

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ag.conv2d(Tensor(np.zeros((1, 2, 4, 4))),
                      Tensor(np.zeros((3, 5, 3, 3))), Tensor(np.zeros(3)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(100)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        seed = rng.normal(size=(2, 4, 5, 5))

        out = ag.conv2d(x, w, b)
        backprop_with_seed(out, seed)

        def f():
            y, _ = nnkernels.conv2d_forward(x.data, w.data, b.data, 1)
            return float((y * seed).sum())

        assert relative_error(x.grad, numeric_gradient(f, x.data)) < CONV_TOL
        assert relative_error(w.grad, numeric_gradient(f, w.data)) < CONV_TOL
        assert relative_error(b.grad, numeric_gradient(f, b.data)) < CONV_TOL

    def test_1x1_head_gradients(self):
        rng = np.random.default_rng(101)
        x = Tensor(rng.normal(size=(2, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(1, 4, 1, 1)), requires_grad=True)
        b = Tensor(rng.normal(size=1), requires_grad=True)
        seed = rng.normal(size=(2, 1, 6, 6))
        out = ag.conv2d(x, w, b, padding=0)
        backprop_with_seed(out, seed)

        def f():
            y, _ = nnkernels.conv2d_forward(x.data, w.data, b.data, 0)
            return float((y * seed).sum())

        assert relative_error(x.grad, numeric_gradient(f, x.data)) < CONV_TOL
        assert relative_error(w.grad, numeric_gradient(f, w.data)) < CONV_TOL

    def test_numba_and_numpy_paths_agree(self):
        rng = np.random.default_rng(102)
        x = rng.normal(size=(2, 8, 64, 64)).astype(np.float32)
        w = rng.normal(size=(4, 8, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        y_loop, xp = nnkernels.conv2d_forward(x, w, b, 1)  # loop kernel (large plane)
        y_np = nnkernels._conv2d_fwd_np(xp, w, b)
        np.testing.assert_allclose(y_loop, y_np, rtol=2e-5, atol=2e-5)


class TestMaxpool:
    def test_single_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = ag.maxpool2(x)
        assert out.data.item() == 4.0

    def test_tie_routes_to_first_rowmajor(self):
        x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
        out = ag.maxpool2(x)
        backprop_with_seed(out, np.ones_like(out.data))
        expected = np.zeros((1, 1, 2, 2))
        expected[0, 0, 0, 0] = 1.0  # first element in scan order wins ties
        np.testing.assert_array_equal(x.grad, expected)

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            ag.maxpool2(Tensor(np.zeros((1, 1, 5, 4))))

    def test_gradient_away_from_ties(self):
        rng = np.random.default_rng(103)
        x = Tensor(rng.permutation(64).astype(float).reshape(1, 1, 8, 8) * 0.37,
                   requires_grad=True)
        seed = rng.normal(size=(1, 1, 4, 4))
        out = ag.maxpool2(x)
        backprop_with_seed(out, seed)

        def f():
            y, _ = nnkernels.maxpool2_forward(x.data)
            return float((y * seed).sum())

        assert relative_error(x.grad, numeric_gradient(f, x.data)) < CONV_TOL


class TestConvTranspose:
    def test_single_pixel_broadcast(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.0))
        w = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = ag.conv_transpose2(x, w, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data[0, 0], 3.0 * np.arange(4.0).reshape(2, 2))

    def test_doubles_shape(self):
        out = ag.conv_transpose2(
            Tensor(np.zeros((2, 3, 5, 7))), Tensor(np.zeros((3, 4, 2, 2))),
            Tensor(np.zeros(4)),
        )
        assert out.data.shape == (2, 4, 10, 14)

    def test_gradients(self):
        rng = np.random.default_rng(104)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        seed = rng.normal(size=(2, 2, 8, 8))
        out = ag.conv_transpose2(x, w, b)
        backprop_with_seed(out, seed)

        def f():
            return float((nnkernels.conv_transpose2_forward(x.data, w.data, b.data)
                          * seed).sum())

        assert relative_error(x.grad, numeric_gradient(f, x.data)) < CONV_TOL
        assert relative_error(w.grad, numeric_gradient(f, w.data)) < CONV_TOL
        assert relative_error(b.grad, numeric_gradient(f, b.data)) < CONV_TOL


class TestBatchNorm:
    def _forward(self, x, gamma, beta, train, rm=None, rv=None):
        rm = np.zeros(x.shape[1]) if rm is None else rm
        rv = np.ones(x.shape[1]) if rv is None else rv
        return ag.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, train)

    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(105)
        x = rng.normal(3.0, 2.5, size=(4, 3, 8, 8))
        out = self._forward(x, np.ones(3), np.zeros(3), train=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-6
        assert np.abs(var - 1.0).max() < 1e-4

    def test_affine_parameters(self):
        rng = np.random.default_rng(106)
        x = rng.normal(size=(4, 2, 8, 8))
        out = self._forward(x, np.full(2, 2.0), np.full(2, 3.0), train=True)
        assert np.allclose(out.data.mean(axis=(0, 2, 3)), 3.0, atol=1e-6)
        assert np.allclose(out.data.std(axis=(0, 2, 3)), 2.0, atol=1e-3)

    def test_batch_of_one_rejected_in_train(self):
        with pytest.raises(ValueError):
            self._forward(np.zeros((1, 2, 4, 4)), np.ones(2), np.zeros(2), train=True)

    def test_eval_uses_running_stats(self):
        x = np.random.default_rng(107).normal(size=(2, 2, 4, 4))
        rm = np.array([1.0, -1.0])
        rv = np.array([4.0, 0.25])
        out = self._forward(x, np.ones(2), np.zeros(2), train=False, rm=rm, rv=rv)
        expected = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_running_stats_update(self):
        rng = np.random.default_rng(108)
        x = rng.normal(2.0, 1.5, size=(8, 1, 16, 16))
        rm, rv = np.zeros(1), np.ones(1)
        self._forward(x, np.ones(1), np.zeros(1), train=True, rm=rm, rv=rv)
        assert np.allclose(rm, 0.1 * x.mean(), atol=1e-12)
        assert np.allclose(rv, 0.9 * 1.0 + 0.1 * x.var(), atol=1e-12)

    def test_full_backward_finite_differences(self):
        rng = np.random.default_rng(109)
        x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        beta = Tensor(rng.normal(size=2), requires_grad=True)
        seed = rng.normal(size=(3, 2, 4, 4))

        out = ag.batchnorm2d(x, gamma, beta, np.zeros(2), np.ones(2), train=True)
        backprop_with_seed(out, seed)

        def f():
            mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
            var = x.data.var(axis=(0, 2, 3), keepdims=True)
            xh = (x.data - mu) / np.sqrt(var + 1e-5)
            y = gamma.data.reshape(1, 2, 1, 1) * xh + beta.data.reshape(1, 2, 1, 1)
            return float((y * seed).sum())

        assert relative_error(x.grad, numeric_gradient(f, x.data)) < 1e-5
        assert relative_error(gamma.grad, numeric_gradient(f, gamma.data)) < 1e-5
        assert relative_error(beta.grad, numeric_gradient(f, beta.data)) < 1e-5

    def test_eval_backward(self):
        rng = np.random.default_rng(110)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        beta = Tensor(rng.normal(size=2), requires_grad=True)
        rm, rv = np.array([0.3, -0.2]), np.array([1.3, 0.6])
        seed = rng.normal(size=(2, 2, 4, 4))
        out = ag.batchnorm2d(x, gamma, beta, rm, rv, train=False)
        backprop_with_seed(out, seed)

        def f():
            xh = (x.data - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
            y = gamma.data.reshape(1, 2, 1, 1) * xh + beta.data.reshape(1, 2, 1, 1)
            return float((y * seed).sum())

        assert relative_error(x.grad, numeric_gradient(f, x.data)) < OTHER_TOL


class TestReluConcat:
    def test_relu_gradient_away_from_kink(self):
        rng = np.random.default_rng(111)
        vals = rng.normal(size=(2, 3, 4, 4))
        vals[np.abs(vals) < 0.05] += 0.2  # keep clear of the kink
        x = Tensor(vals, requires_grad=True)
        seed = rng.normal(size=vals.shape)
        out = ag.relu(x)
        backprop_with_seed(out, seed)

        def f():
            return float((np.maximum(x.data, 0) * seed).sum())

        assert relative_error(x.grad, numeric_gradient(f, x.data)) < OTHER_TOL

    def test_concat_splits_gradient(self):
        rng = np.random.default_rng(112)
        a = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
        out = ag.concat_channels(a, b)
        assert out.data.shape == (1, 5, 4, 4)
        seed = rng.normal(size=out.data.shape)
        backprop_with_seed(out, seed)
        np.testing.assert_array_equal(a.grad, seed[:, :2])
        np.testing.assert_array_equal(b.grad, seed[:, 2:])


class TestMaskedMse:
    def test_exact_match_is_zero(self):
        pred = Tensor(np.ones((1, 1, 4, 4)))
        loss = ag.masked_mse(pred, np.ones((1, 1, 4, 4)), np.zeros((1, 1, 4, 4), bool))
        assert float(loss.data) == 0.0

    def test_uniform_error(self):
        pred = Tensor(np.full((1, 1, 4, 4), 2.0))
        loss = ag.masked_mse(pred, np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4), bool))
        assert float(loss.data) == 4.0

    def test_hand_case_with_mask(self):
        pred = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2))
        target = np.array([[99.0, 0.0], [0.0, 0.0]]).reshape(1, 1, 2, 2)
        mask = np.array([[True, False], [False, False]]).reshape(1, 1, 2, 2)
        loss = ag.masked_mse(pred, target, mask)
        assert float(loss.data) == pytest.approx((1 + 4 + 9) / 3)

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError):
            ag.masked_mse(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 2)),
                          np.ones((1, 1, 2, 2), bool))

    def test_gradient(self):
        rng = np.random.default_rng(113)
        pred = Tensor(rng.normal(size=(2, 1, 4, 4)), requires_grad=True)
        target = rng.normal(size=(2, 1, 4, 4))
        mask = rng.random((2, 1, 4, 4)) < 0.3
        loss = ag.masked_mse(pred, target, mask)
        loss.backward()

        def f():
            keep = ~mask
            diff = np.where(keep, pred.data - target, 0.0)
            return float((diff * diff).sum() / keep.sum())

        assert relative_error(pred.grad, numeric_gradient(f, pred.data)) < OTHER_TOL


class TestAdam:
    def test_first_step_magnitude(self):
        p = np.array([1.0])
        m = np.zeros(1)
        v = np.zeros(1)
        ag.adam_step(p, np.array([0.37]), m, v, t=1, lr=1e-3)
        # bias-corrected first step moves by ~lr * sign(grad)
        assert abs((1.0 - p[0]) - 1e-3) < 1e-9

    def test_zero_gradient_no_move(self):
        p = np.array([2.5])
        ag.adam_step(p, np.zeros(1), np.zeros(1), np.zeros(1), t=1)
        assert p[0] == 2.5

    def test_descends_quadratic(self):
        p = np.array([1.0])
        m, v = np.zeros(1), np.zeros(1)
        trace = [abs(p[0])]
        for t in range(1, 101):
            ag.adam_step(p, 2.0 * p, m, v, t=t, lr=1e-2)
            trace.append(abs(p[0]))
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
        assert trace[-1] < 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ag.adam_step(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3), t=1)


class TestBackwardGraph:
    def test_chain_through_composite_graph(self):
        rng = np.random.default_rng(114)
        x = Tensor(rng.normal(size=(2, 2, 8, 8)), requires_grad=False)
        w1 = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.3, requires_grad=True)
        b1 = Tensor(np.zeros(4), requires_grad=True)
        w2 = Tensor(rng.normal(size=(1, 4, 3, 3)) * 0.3, requires_grad=True)
        b2 = Tensor(np.zeros(1), requires_grad=True)
        target = rng.normal(size=(2, 1, 4, 4))
        mask = np.zeros((2, 1, 4, 4), bool)

        def forward():
            h = ag.conv2d(Tensor(x.data), w1, b1)
            h = ag.relu(h)
            h = ag.maxpool2(h)
            out = ag.conv2d(h, w2, b2)
            return ag.masked_mse(out, target, mask)

        loss = forward()
        loss.backward()

        def f():
            h, _ = nnkernels.conv2d_forward(x.data, w1.data, b1.data, 1)
            h = np.maximum(h, 0)
            h, _ = nnkernels.maxpool2_forward(h)
            out, _ = nnkernels.conv2d_forward(h, w2.data, b2.data, 1)
            return float(((out - target) ** 2).mean())

        assert relative_error(w1.grad, numeric_gradient(f, w1.data)) < OTHER_TOL
        assert relative_error(w2.grad, numeric_gradient(f, w2.data)) < OTHER_TOL
        assert relative_error(b1.grad, numeric_gradient(f, b1.data)) < OTHER_TOL
