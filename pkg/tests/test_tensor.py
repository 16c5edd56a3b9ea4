"""Autodiff core: forward values, gradients, graph semantics."""

import numpy as np
import pytest

from reenact.tensor import (ShapeError, Tensor, avg_pool2d, backward, concat,
                            concat_channels, conv2d, grad_check, instance_norm,
                            matmul, nearest_upsample2d, softmax_lastdim)


def rng(k=0):
    return np.random.default_rng(k)


def param(shape, seed=0):
    return Tensor(rng(seed).standard_normal(shape), requires_grad=True)


class TestForward:
    def test_add_broadcast(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((3,)))
        assert np.array_equal((a + b).data, np.full((2, 3), 2.0))

    def test_matmul_matches_numpy(self):
        a, b = rng(1).standard_normal((4, 5)), rng(2).standard_normal((5, 3))
        out = matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-14)

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(rng(3).standard_normal((4, 7)))
        rows = softmax_lastdim(x).data.sum(axis=-1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_instance_norm_statistics(self):
        x = Tensor(rng(4).standard_normal((2, 3, 8, 8)))
        y = instance_norm(x).data
        np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=(2, 3)), 1.0, atol=1e-3)

    def test_conv2d_identity_kernel(self):
        x = Tensor(rng(5).standard_normal((1, 1, 6, 6)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_conv2d_stride2_shape(self):
        x = param((2, 3, 8, 8), 6)
        out = conv2d(x, param((4, 3, 3, 3), 7), param((4,), 8), stride=2)
        assert out.shape == (2, 4, 4, 4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises((ShapeError, ValueError)):
            matmul(param((2, 3)), param((4, 5)))

    def test_nonfinite_rejected_by_dispatch(self):
        from reenact.tensor import forward
        with pytest.raises(ValueError):
            forward("relu", [Tensor(np.array([1.0, np.inf]))])

    def test_avg_pool_and_upsample(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        p = avg_pool2d(x, 2)
        assert p.shape == (1, 1, 2, 2)
        assert p.data[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
        u = nearest_upsample2d(p)
        assert u.shape == (1, 1, 4, 4)
        assert u.data[0, 0, 0, 0] == u.data[0, 0, 1, 1]


class TestGradients:
    @pytest.mark.parametrize("op", ["add", "mul", "sub", "div", "relu", "tanh",
                                    "exp", "sqrt", "abs"])
    def test_elementwise(self, op):
        a = param((3, 4), 10)
        b = Tensor(rng(11).standard_normal((3, 4)) + 3.0, requires_grad=True)
        w = rng(12).standard_normal((3, 4))
        fns = {
            "add": lambda: ((a + b) * Tensor(w)).sum(),
            "mul": lambda: ((a * b) * Tensor(w)).sum(),
            "sub": lambda: ((a - b) * Tensor(w)).sum(),
            "div": lambda: ((a / b) * Tensor(w)).sum(),
            "relu": lambda: ((a + 0.1).relu() * Tensor(w)).sum(),
            "tanh": lambda: (a.tanh() * Tensor(w)).sum(),
            "exp": lambda: (a.exp() * Tensor(w)).sum(),
            "sqrt": lambda: (b.sqrt() * Tensor(w)).sum(),
            "abs": lambda: ((a + 0.2).abs() * Tensor(w)).sum(),
        }
        report = grad_check(fns[op], [a, b])
        assert report["max_rel_error"] < 1e-4

    def test_matmul_grad(self):
        a, b = param((3, 5), 13), param((5, 2), 14)
        w = rng(15).standard_normal((3, 2))
        report = grad_check(lambda: (matmul(a, b) * Tensor(w)).sum(), [a, b])
        assert report["max_rel_error"] < 1e-6

    def test_softmax_grad(self):
        x = param((2, 6), 16)
        w = rng(17).standard_normal((2, 6))
        report = grad_check(lambda: (softmax_lastdim(x) * Tensor(w)).sum(), [x])
        assert report["max_rel_error"] < 1e-4

    def test_conv2d_grad(self):
        x, w, b = param((2, 2, 5, 5), 18), param((3, 2, 3, 3), 19), param((3,), 20)
        mask = rng(21).standard_normal((2, 3, 5, 5))
        report = grad_check(lambda: (conv2d(x, w, b) * Tensor(mask)).sum(), [x, w, b])
        assert report["max_rel_error"] < 1e-6

    def test_conv2d_stride2_grad(self):
        x, w, b = param((1, 2, 6, 6), 22), param((2, 2, 3, 3), 23), param((2,), 24)
        mask = rng(25).standard_normal((1, 2, 3, 3))
        report = grad_check(
            lambda: (conv2d(x, w, b, stride=2) * Tensor(mask)).sum(), [x, w, b])
        assert report["max_rel_error"] < 1e-6

    def test_instance_norm_grad(self):
        x = param((2, 2, 4, 4), 26)
        mask = rng(27).standard_normal((2, 2, 4, 4))
        report = grad_check(lambda: (instance_norm(x) * Tensor(mask)).sum(), [x])
        assert report["max_rel_error"] < 1e-4

    def test_concat_and_getitem_grad(self):
        a, b = param((2, 3), 28), param((2, 2), 29)
        w = rng(30).standard_normal((5,))
        report = grad_check(
            lambda: (concat([a, b], axis=1)[0] * Tensor(w)).sum(), [a, b])
        assert report["max_rel_error"] < 1e-6

    def test_broadcast_grad_fan_in(self):
        a, b = param((4, 3), 31), param((3,), 32)
        report = grad_check(lambda: ((a * b).tanh()).sum(), [a, b])
        assert report["max_rel_error"] < 1e-4


class TestGraphSemantics:
    def test_fanout_accumulates(self):
        x = param((3,), 40)
        y = (x * x + x).sum()
        backward(y)
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0, atol=1e-12)

    def test_backward_twice_accumulates(self):
        x = param((3,), 41)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_allclose(x.grad, 2.0, atol=1e-12)

    def test_backward_requires_scalar(self):
        x = param((3,), 42)
        with pytest.raises(Exception):
            backward(x * x)

    def test_detach_blocks_gradient(self):
        x = param((3,), 43)
        backward((x.detach() * x).sum())
        np.testing.assert_allclose(x.grad, x.data, atol=1e-12)

    def test_concat_channels(self):
        a, b = param((1, 2, 3, 3), 44), param((1, 3, 3, 3), 45)
        out = concat_channels([a, b])
        assert out.shape == (1, 5, 3, 3)
