"""Adam, gradient clipping, spectral normalization."""

import numpy as np
import pytest

from reenact.optim import (AdamState, SpectralState, adam_step, clip_grad_norm,
                           spectral_normalize)
from reenact.tensor import Tensor


def test_adam_first_step_closed_form():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.array([1.0, -2.0, 0.5])
    state = AdamState([p], lr=0.1, beta1=0.0, beta2=0.999)
    adam_step(state)
    # with bias correction the first step moves by lr * sign(g) (up to eps)
    expected = -0.1 * np.sign(p.grad) * (np.abs(p.grad) / (np.abs(p.grad) + 1e-8))
    np.testing.assert_allclose(p.data, expected, rtol=1e-6)


def test_adam_beta1_momentum():
    p = Tensor(np.zeros(1), requires_grad=True)
    state = AdamState([p], lr=0.1, beta1=0.9)
    p.grad = np.array([1.0])
    adam_step(state)
    first = p.data.copy()
    p.grad = np.array([1.0])
    adam_step(state)
    assert p.data[0] < first[0] < 0.0


def test_adam_missing_grad_rejected():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState([p], lr=0.1)
    with pytest.raises(ValueError):
        adam_step(state)


def test_clip_grad_norm_scales_in_place():
    g1, g2 = np.array([3.0, 0.0]), np.array([0.0, 4.0])
    norm = clip_grad_norm([g1, g2], 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(np.sum(g1 ** 2) + np.sum(g2 ** 2))
    assert total == pytest.approx(1.0)


def test_clip_grad_norm_noop_below_threshold():
    g = np.array([0.3, 0.4])
    norm = clip_grad_norm([g], 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_allclose(g, [0.3, 0.4])


def test_clip_rejects_nonpositive_max():
    with pytest.raises(ValueError):
        clip_grad_norm([np.ones(2)], 0.0)


def test_spectral_normalize_converges_to_unit_norm():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    state = SpectralState(w.data.shape, rng)
    for _ in range(50):
        out = spectral_normalize(w, state)
    sigma = np.linalg.svd(out.data, compute_uv=False)[0]
    assert sigma == pytest.approx(1.0, abs=1e-6)


def test_spectral_normalize_no_update_is_pure():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    state = SpectralState(w.data.shape, rng)
    spectral_normalize(w, state)
    u0, v0 = state.u.copy(), state.v.copy()
    a = spectral_normalize(w, state, update=False)
    b = spectral_normalize(w, state, update=False)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(state.u, u0)
    np.testing.assert_array_equal(state.v, v0)


def test_spectral_normalize_conv_weight_shape():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((8, 4, 3, 3)), requires_grad=True)
    state = SpectralState(w.data.shape, rng)
    out = spectral_normalize(w, state)
    assert out.shape == (8, 4, 3, 3)
