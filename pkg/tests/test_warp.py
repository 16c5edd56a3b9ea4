"""Bilinear warping and the warp-alignment decoder block."""

import numpy as np
import pytest

from reenact.tensor import Tensor, grad_check
from reenact.warp import (average_targets, bilinear_warp, downsample_flow,
                          normalize_target_features, warp_alignment_block)


def rng(k=0):
    return np.random.default_rng(k)


class TestBilinearWarp:
    def test_zero_flow_identity_bit_exact(self):
        s = Tensor(rng(0).standard_normal((2, 3, 6, 6)))
        out = bilinear_warp(s, Tensor(np.zeros((2, 2, 6, 6))))
        np.testing.assert_array_equal(out.data, s.data)

    def test_integer_shift(self):
        w = 7
        s = Tensor(rng(1).standard_normal((1, 1, w, w)))
        flow = np.zeros((1, 2, w, w))
        flow[0, 0] = -2.0 / (w - 1)  # sample one pixel to the left
        out = bilinear_warp(s, Tensor(flow))
        np.testing.assert_allclose(out.data[0, 0, :, 1:], s.data[0, 0, :, :-1],
                                   atol=1e-12)
        np.testing.assert_allclose(out.data[0, 0, :, 0], 0.0, atol=1e-12)

    def test_linear_in_features(self):
        f = Tensor(rng(2).uniform(-0.5, 0.5, (1, 2, 5, 5)))
        a = Tensor(rng(3).standard_normal((1, 2, 5, 5)))
        b = Tensor(rng(4).standard_normal((1, 2, 5, 5)))
        lhs = bilinear_warp(Tensor(2.0 * a.data + 3.0 * b.data), f).data
        rhs = 2.0 * bilinear_warp(a, f).data + 3.0 * bilinear_warp(b, f).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_out_of_range_samples_zero(self):
        s = Tensor(np.ones((1, 1, 4, 4)))
        flow = np.full((1, 2, 4, 4), 10.0)  # far outside the grid
        out = bilinear_warp(s, Tensor(flow))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_gradients(self):
        s = Tensor(rng(5).standard_normal((1, 2, 4, 4)), requires_grad=True)
        f = Tensor(rng(6).uniform(-0.3, 0.3, (1, 2, 4, 4)) + 0.117,
                   requires_grad=True)
        w = rng(7).standard_normal((1, 2, 4, 4))
        report = grad_check(lambda: (bilinear_warp(s, f) * Tensor(w)).sum(), [s, f])
        assert report["max_rel_error"] < 1e-4

    def test_flow_channel_count_checked(self):
        with pytest.raises(Exception):
            bilinear_warp(Tensor(np.zeros((1, 2, 4, 4))),
                          Tensor(np.zeros((1, 3, 4, 4))))


class TestHelpers:
    def test_downsample_flow_preserves_normalized_offsets(self):
        flow = Tensor(np.full((1, 2, 8, 8), 0.25))
        down = downsample_flow(flow, 4, 4)
        assert down.shape == (1, 2, 4, 4)
        np.testing.assert_allclose(down.data, 0.25, atol=1e-12)

    def test_normalize_target_features_zero_flow_passthrough(self):
        pyramid = [Tensor(rng(8).standard_normal((1, 2, 8, 8))),
                   Tensor(rng(15).standard_normal((1, 3, 4, 4)))]
        zero = normalize_target_features(pyramid, Tensor(np.zeros((1, 2, 8, 8))))
        for a, b in zip(zero, pyramid):
            np.testing.assert_array_equal(a.data, b.data)

    def test_average_targets(self):
        a = [Tensor(np.full((1, 2, 3, 3), 1.0)), Tensor(np.full((1, 1, 2, 2), 5.0))]
        b = [Tensor(np.full((1, 2, 3, 3), 3.0)), Tensor(np.full((1, 1, 2, 2), 7.0))]
        out = average_targets([a, b])
        np.testing.assert_allclose(out[0].data, 2.0)
        np.testing.assert_allclose(out[1].data, 6.0)

    def test_warp_alignment_block_shapes_and_grad(self):
        c_u, c_s = 3, 2
        u = Tensor(rng(9).standard_normal((1, c_u, 4, 4)), requires_grad=True)
        s = Tensor(rng(10).standard_normal((1, c_s, 4, 4)), requires_grad=True)
        fw = Tensor(rng(11).standard_normal((2, c_u, 1, 1)) * 0.3,
                    requires_grad=True)
        fb = Tensor(np.zeros(2), requires_grad=True)
        out = warp_alignment_block(u, s, fw, fb)
        assert out.shape == (1, c_u + c_s, 4, 4)
        w = rng(12).standard_normal(out.shape)
        report = grad_check(
            lambda: (warp_alignment_block(u, s, fw, fb) * Tensor(w)).sum(),
            [u, s, fw, fb])
        assert report["max_rel_error"] < 1e-4

    def test_warp_alignment_zero_flow_passthrough(self):
        u = Tensor(rng(13).standard_normal((1, 3, 4, 4)))
        s = Tensor(rng(14).standard_normal((1, 2, 4, 4)))
        fw = Tensor(np.zeros((2, 3, 1, 1)))
        fb = Tensor(np.zeros(2))
        out = warp_alignment_block(u, s, fw, fb)
        # zero flow: the warped target features pass through untouched
        np.testing.assert_array_equal(out.data[:, 3:], s.data)
        np.testing.assert_array_equal(out.data[:, :3], u.data)
