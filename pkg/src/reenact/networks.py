"""Network assemblies: target/driver encoders, blender, decoder, generator,
projection discriminator, and the landmark disentangler model.

Channel rule: depth d carries min(base_channels * 2^d, max_channels)
channels. The target encoder runs a U-Net (five down, four up with skips)
whose deepest map is the target bottleneck; its upsampling path emits the
pose-normalization flow. The discriminator concatenates image and landmark
image at the input, conditions on identity through a per-position projection
term, and keeps patch scores (no global pooling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .attention import AttentionBlockParams, blender as run_blender
from .nn import Conv2d, Linear, Module, ResDown, ResUp
from .tensor import ShapeError, Tensor, concat_channels
from .warp import average_targets, normalize_target_features, warp_alignment_block

__all__ = ["GeneratorConfig", "TargetEncoder", "DriverEncoder", "Blender",
           "Decoder", "Generator", "Discriminator", "Disentangler"]


@dataclass
class GeneratorConfig:
    image_size: int = 64
    base_channels: int = 32
    max_channels: int = 512
    n_targets: int = 4

    # fixed structural counts
    target_down: int = 5
    target_up: int = 4
    driver_down: int = 4
    blender_blocks: int = 3
    decoder_blocks: int = 4

    def __post_init__(self):
        if self.image_size % 32 != 0:
            raise ValueError(f"image size must be divisible by 32, got {self.image_size}")

    def channels(self, depth: int) -> int:
        return min(self.base_channels * (2 ** depth), self.max_channels)

    def to_records(self) -> dict[str, np.ndarray]:
        return {"config." + k: np.array(float(getattr(self, k)))
                for k in ("image_size", "base_channels", "max_channels", "n_targets")}

    @classmethod
    def from_records(cls, records: dict[str, np.ndarray]) -> "GeneratorConfig":
        return cls(image_size=int(records["config.image_size"]),
                   base_channels=int(records["config.base_channels"]),
                   max_channels=int(records["config.max_channels"]),
                   n_targets=int(records["config.n_targets"]))


class TargetEncoder(Module):
    """U-Net over concat(image, landmark image); no normalization layers.

    Returns (z_y, pyramid s_1..s_4 warped into pose-normalized form, f_y).
    """

    def __init__(self, cfg: GeneratorConfig, rng, spectral_norm: bool = True):
        super().__init__()
        c0 = cfg.channels(0)
        self.cfg = cfg
        self.in_conv = Conv2d(6, c0, 3, rng, spectral_norm=spectral_norm)
        self.down = [ResDown(cfg.channels(j), cfg.channels(j + 1), rng,
                             norm=False, spectral_norm=spectral_norm)
                     for j in range(cfg.target_down)]
        # upsampling path consumes skip concats; runs 1/32 -> 1/2
        ups = []
        for j in range(cfg.target_up):
            c_in = cfg.channels(cfg.target_down - j)
            c_out = cfg.channels(cfg.target_down - 1 - j)
            ups.append(ResUp(c_in, c_out, rng, norm=False, spectral_norm=spectral_norm))
        self.up = ups
        self.merge = [Conv2d(2 * cfg.channels(cfg.target_down - 1 - j),
                             cfg.channels(cfg.target_down - 1 - j), 3, rng,
                             spectral_norm=spectral_norm)
                      for j in range(cfg.target_up)]
        self.flow_conv = Conv2d(cfg.channels(1), 2, 3, rng, spectral_norm=spectral_norm)

    def __call__(self, y: Tensor, r_y: Tensor):
        if y.shape[2:] != r_y.shape[2:]:
            raise ShapeError(f"target image {y.shape} vs landmark image {r_y.shape}")
        x = self.in_conv(concat_channels([y, r_y]))
        skips = []
        for blk in self.down:
            x = blk(x)
            skips.append(x)
        z_y = skips[-1]  # s_5
        u = z_y
        for j, (blk, mrg) in enumerate(zip(self.up, self.merge)):
            u = blk(u)
            u = mrg(concat_channels([u, skips[-2 - j]]))
        f_y = self.flow_conv(u).tanh() * 2.0
        pyramid = normalize_target_features(skips[:-1], f_y)
        return z_y, pyramid, f_y


class DriverEncoder(Module):
    """Four residual downsampling blocks over the driver landmark image."""

    def __init__(self, cfg: GeneratorConfig, rng, spectral_norm: bool = True):
        super().__init__()
        self.in_conv = Conv2d(3, cfg.channels(0), 3, rng, spectral_norm=spectral_norm)
        self.down = [ResDown(cfg.channels(j), cfg.channels(j + 1), rng,
                             norm=True, spectral_norm=spectral_norm)
                     for j in range(cfg.driver_down)]

    def __call__(self, r_x: Tensor) -> Tensor:
        x = self.in_conv(r_x)
        for blk in self.down:
            x = blk(x)
        return x


class AttnBlock(Module):
    """Parameters of one image attention block; weights spectrally
    normalized like every other projection."""

    def __init__(self, c_x: int, c_y: int, rng, spectral_norm: bool = True):
        super().__init__()
        c_a = c_x // 2
        self.q = Linear(c_x, c_a, rng, spectral_norm=spectral_norm, bias=False)
        self.qp = Linear(c_x, c_a, rng, spectral_norm=spectral_norm, bias=False)
        self.k = Linear(c_y, c_a, rng, spectral_norm=spectral_norm, bias=False)
        self.kp = Linear(c_y, c_a, rng, spectral_norm=spectral_norm, bias=False)
        self.v = Linear(c_y, c_x, rng, spectral_norm=spectral_norm, bias=False)
        self.conv = Conv2d(c_x, c_x, 3, rng, spectral_norm=spectral_norm)

    def params(self) -> AttentionBlockParams:
        return AttentionBlockParams(
            self.q.normalized_weight(), self.qp.normalized_weight(),
            self.k.normalized_weight(), self.kp.normalized_weight(),
            self.v.normalized_weight(),
            self.conv.normalized_weight(), self.conv.b)


class Blender(Module):
    def __init__(self, cfg: GeneratorConfig, rng, spectral_norm: bool = True):
        super().__init__()
        c_x = cfg.channels(cfg.driver_down)
        c_y = cfg.channels(cfg.target_down)
        self.blocks = [AttnBlock(c_x, c_y, rng, spectral_norm=spectral_norm)
                       for _ in range(cfg.blender_blocks)]

    def __call__(self, z_x: Tensor, z_y_all: Tensor) -> Tensor:
        return run_blender(z_x, z_y_all, [b.params() for b in self.blocks])


class Decoder(Module):
    """Four warp-alignment + residual upsampling stages, coarse to fine, then
    a final convolution and tanh."""

    def __init__(self, cfg: GeneratorConfig, rng, spectral_norm: bool = True):
        super().__init__()
        self.cfg = cfg
        flows, ups = [], []
        c_u = cfg.channels(cfg.driver_down)
        for j in range(cfg.decoder_blocks):
            level = cfg.decoder_blocks - j  # pyramid level 4..1
            c_s = cfg.channels(level)
            flows.append(Conv2d(c_u, 2, 1, rng, spectral_norm=spectral_norm))
            ups.append(ResUp(c_u + c_s, cfg.channels(level - 1), rng,
                             norm=True, spectral_norm=spectral_norm))
            c_u = cfg.channels(level - 1)
        self.flows = flows
        self.ups = ups
        self.out_conv = Conv2d(cfg.channels(0), 3, 3, rng, spectral_norm=spectral_norm)

    def __call__(self, z_xy: Tensor, s_mean: list[Tensor]) -> Tensor:
        u = z_xy
        for j, (fc, up) in enumerate(zip(self.flows, self.ups)):
            level = self.cfg.decoder_blocks - 1 - j  # list index 3..0
            u = warp_alignment_block(u, s_mean[level], fc.normalized_weight(), fc.b)
            u = up(u)
        return self.out_conv(u).tanh()


class Generator(Module):
    """Full reenactment generator G(r_x; {y_i}, {r_y_i})."""

    def __init__(self, cfg: GeneratorConfig, seed: int = 0, spectral_norm: bool = True):
        super().__init__()
        rng = rngmod.stream(seed, "generator")
        self.cfg = cfg
        self.target_encoder = TargetEncoder(cfg, rng, spectral_norm)
        self.driver_encoder = DriverEncoder(cfg, rng, spectral_norm)
        self.blender = Blender(cfg, rng, spectral_norm)
        self.decoder = Decoder(cfg, rng, spectral_norm)

    def encode_targets(self, ys: Tensor, r_ys: Tensor):
        """ys, r_ys: (N, K, 3, H, W). Returns stacked bottlenecks
        (N, K, c, h, w) and the K-averaged warped pyramid."""
        if ys.shape != r_ys.shape:
            raise ShapeError(f"targets {ys.shape} vs landmark images {r_ys.shape}")
        n, k = ys.shape[0], ys.shape[1]
        z_list, pyr_sets = [], []
        for i in range(k):
            z_y, pyramid, _ = self.target_encoder(ys[:, i], r_ys[:, i])
            z_list.append(z_y.reshape(n, 1, *z_y.shape[1:]))
            pyr_sets.append(pyramid)
        from .tensor import concat
        z_y_all = concat(z_list, axis=1)
        s_mean = average_targets(pyr_sets)
        return z_y_all, s_mean

    def __call__(self, r_x: Tensor, ys: Tensor, r_ys: Tensor) -> Tensor:
        if r_x.shape[0] != ys.shape[0]:
            raise ShapeError(f"driver batch {r_x.shape[0]} vs target batch {ys.shape[0]}")
        z_y_all, s_mean = self.encode_targets(ys, r_ys)
        z_x = self.driver_encoder(r_x)
        z_xy = self.blender(z_x, z_y_all)
        return self.decoder(z_xy, s_mean)


class Discriminator(Module):
    """Projection discriminator over concat(image, landmark image) with
    per-position identity projection and patch scores."""

    def __init__(self, cfg: GeneratorConfig, n_identities: int, seed: int = 0):
        super().__init__()
        rng = rngmod.stream(seed, "discriminator")
        self.cfg = cfg
        self.n_identities = n_identities
        c_top = cfg.channels(5)
        self.in_conv = Conv2d(6, cfg.channels(0), 3, rng, spectral_norm=True)
        self.down = [ResDown(cfg.channels(j), cfg.channels(j + 1), rng,
                             norm=False, spectral_norm=True)
                     for j in range(5)]
        self.score = Conv2d(c_top, 1, 1, rng, spectral_norm=True)
        self.embedding = Tensor(
            np.vstack([rngmod.stream(seed, "emb", i).standard_normal(c_top) / np.sqrt(c_top)
                       for i in range(n_identities)]), requires_grad=True)

    def __call__(self, x: Tensor, r: Tensor, c):
        """Returns (score map (N, 1, H/32, W/32), feature taps)."""
        idx = np.atleast_1d(np.asarray(c, dtype=np.int64))
        if np.any(idx < 0) or np.any(idx >= self.n_identities):
            raise ValueError(f"unknown identity index in {idx} (have {self.n_identities})")
        h = self.in_conv(concat_channels([x, r]))
        taps = []
        for blk in self.down:
            h = blk(h)
            taps.append(h)
        uncond = self.score(h)
        emb = self.embedding[idx]                       # (N, c_top)
        n, c_top = emb.shape
        proj = (h * emb.reshape(n, c_top, 1, 1)).sum(axis=1, keepdims=True)
        return uncond + proj, taps


class Disentangler(Module):
    """Expression-coefficient regressor: a small 4-stage conv encoder over
    the frame plus a 2-layer MLP on concat(image feature, centered
    landmark)."""

    def __init__(self, seed: int = 0, image_size: int = 32, n_out: int = 48,
                 hidden: int = 256):
        super().__init__()
        rng = rngmod.stream(seed, "disentangler")
        self.image_size = image_size
        chans = [3, 16, 32, 64, 64]
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2)
                      for i in range(4)]
        self.fc1 = Linear(chans[-1] + 68 * 3, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def __call__(self, image: Tensor, centered_landmark: Tensor) -> Tensor:
        """image: (N, 3, S, S); centered_landmark: (N, 204). Output (N, 48)."""
        h = image
        for conv in self.convs:
            h = conv(h).relu()
        feat = h.mean(axis=(2, 3))  # global average pool -> (N, C)
        return self.fc2(self.fc1(concat_channels_flat(feat, centered_landmark)).relu())


def concat_channels_flat(a: Tensor, b: Tensor) -> Tensor:
    from .tensor import concat
    return concat([a, b], axis=1)
