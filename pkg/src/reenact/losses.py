"""GAN losses: hinge terms, feature matching, masked perceptual losses.

Perceptual features come from fixed random-weight conv networks (one per
loss, independent seeds) with taps at five scales; weights are frozen at
construction and never appear in any optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .nn import Conv2d, Module
from .tensor import Tensor, avg_pool2d

__all__ = ["LossWeights", "FeatureNet", "hinge_d_loss", "hinge_g_loss",
           "feature_matching_loss", "perceptual_loss", "generator_total_loss"]


@dataclass
class LossWeights:
    perceptual: float = 10.0
    perceptual_face: float = 0.01
    feature_matching: float = 10.0


class FeatureNet(Module):
    """Frozen random 5-stage conv network; one tap after each stage."""

    def __init__(self, seed: int, channels: tuple = (16, 32, 32, 64, 64)):
        super().__init__()
        rng = rngmod.stream(seed, "featurenet")
        convs = []
        c_in = 3
        for c_out in channels:
            convs.append(Conv2d(c_in, c_out, 3, rng, stride=2))
            c_in = c_out
        self.stages = convs
        for p in self.parameters():
            p.requires_grad = False
        object.__setattr__(self, "_params", {})
        for c in self.stages:
            object.__setattr__(c, "_params", {})

    def __call__(self, x: Tensor) -> list[Tensor]:
        taps = []
        h = x
        for conv in self.stages:
            h = conv(h).relu()
            taps.append(h)
        return taps


def hinge_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Mean over patches of max(0, 1 - real) + max(0, 1 + fake)."""
    if d_real.shape != d_fake.shape:
        raise ValueError(f"score map shapes differ: {d_real.shape} vs {d_fake.shape}")
    return (1.0 - d_real).relu().mean() + (1.0 + d_fake).relu().mean()


def hinge_g_loss(d_fake: Tensor) -> Tensor:
    """Negative mean of fake patch scores."""
    return -d_fake.mean()


def feature_matching_loss(real_taps: list[Tensor], fake_taps: list[Tensor]) -> Tensor:
    """Sum over taps of mean absolute difference; gradients reach only the
    fake branch, real features are detached."""
    if len(real_taps) != len(fake_taps):
        raise ValueError(f"tap count mismatch: {len(real_taps)} vs {len(fake_taps)}")
    total = None
    for r, f in zip(real_taps, fake_taps):
        term = (f - r.detach()).abs().mean()
        total = term if total is None else total + term
    return total


def perceptual_loss(x: Tensor, x_hat: Tensor, mask: np.ndarray | None,
                    net: FeatureNet) -> Tensor:
    """Per-tap weighted mean L1 between feature stacks of the two images.

    Pixels inside the facial mask weigh 3x (weight = 1 + 2*mask); the mask is
    average-pooled to each tap's resolution. Accepts one (h, w) mask shared
    across the batch or a per-sample (n, h, w) stack.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape == x.shape[2:]:
            mask = np.broadcast_to(mask, (x.shape[0],) + x.shape[2:])
        if mask.shape != (x.shape[0],) + tuple(x.shape[2:]):
            raise ValueError(f"mask shape {mask.shape} does not match image {x.shape}")
    taps_x = net(x.detach() if x.requires_grad else x)
    taps_h = net(x_hat)
    total = None
    for tx, th in zip(taps_x, taps_h):
        diff = (th - tx).abs()
        if mask is not None:
            m = Tensor(mask.reshape(mask.shape[0], 1, *mask.shape[1:]))
            factor = x.shape[2] // tx.shape[2]
            if factor > 1:
                m = avg_pool2d(m, factor)
            diff = diff * (1.0 + 2.0 * m)
        term = diff.mean()
        total = term if total is None else total + term
    return total


def generator_total_loss(l_gan: Tensor, l_p: Tensor, l_pf: Tensor, l_fm: Tensor,
                         weights: LossWeights = LossWeights()) -> Tensor:
    return (l_gan + weights.perceptual * l_p + weights.perceptual_face * l_pf
            + weights.feature_matching * l_fm)
