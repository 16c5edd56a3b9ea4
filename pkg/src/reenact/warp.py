"""Flow-based feature warping and the two-stage target alignment.

Flow maps are NCHW tensors with 2 channels: channel 0 is the horizontal
offset, channel 1 the vertical offset, in normalized coordinates where the
image spans [-1, 1]. Offsets add to the identity sampling grid, so zero flow
is an exact identity. Out-of-bounds samples read zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, concat_channels

__all__ = ["bilinear_warp", "downsample_flow", "normalize_target_features",
           "average_targets", "warp_alignment_block"]


def bilinear_warp(s: Tensor, f: Tensor) -> Tensor:
    """Bilinear sample of `s` (N, C, H, W) at grid + `f` (N, 2, H, W).

    Differentiable w.r.t. both the features and the flow; zero padding
    outside the image.
    """
    if s.data.ndim != 4 or f.data.ndim != 4 or f.shape[1] != 2:
        raise ShapeError(f"bilinear_warp: features {s.shape}, flow {f.shape}")
    n, c, h, w = s.shape
    if f.shape[0] != n or f.shape[2] != h or f.shape[3] != w:
        raise ShapeError(f"bilinear_warp: flow size {f.shape} does not match features {s.shape}")

    # Identity grid in pixel units; normalized offsets scale by (dim-1)/2.
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = (w - 1) / 2.0
    sy = (h - 1) / 2.0
    px = gx[None] + f.data[:, 0] * sx  # (n, h, w)
    py = gy[None] + f.data[:, 1] * sy

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx = px - x0
    wy = py - y0

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc = np.clip(xi, 0, w - 1)
            yc = np.clip(yi, 0, h - 1)
            ni = np.arange(n)[:, None, None]
            val = s.data[ni, :, yc, xc]          # (n, h, w, c)
            val = val * valid[..., None]
            wgt = (wx if dx else (1.0 - wx)) * (wy if dy else (1.0 - wy))
            corners.append((xc, yc, valid, wgt, val))

    out_hwc = np.zeros((n, h, w, c))
    for _, _, _, wgt, val in corners:
        out_hwc += wgt[..., None] * val
    out = Tensor(np.moveaxis(out_hwc, -1, 1), _parents=(s, f), op="bilinear_warp")

    if out.requires_grad:
        def bw(g):
            g_hwc = np.moveaxis(g, 1, -1)  # (n, h, w, c)
            nidx = np.broadcast_to(np.arange(n)[:, None, None], (n, h, w))
            if s.requires_grad:
                gs = np.zeros_like(s.data)
                for xc, yc, valid, wgt, _ in corners:
                    contrib = g_hwc * (wgt * valid)[..., None]
                    np.add.at(gs, (nidx, slice(None), yc, xc), contrib)
                s._accumulate(gs)
            if f.requires_grad:
                dpx = np.zeros((n, h, w))
                dpy = np.zeros((n, h, w))
                for (xc, yc, valid, wgt, val), (dy, dx) in zip(
                        corners, [(0, 0), (0, 1), (1, 0), (1, 1)]):
                    gv = (g_hwc * val).sum(axis=-1)
                    dwx = (1.0 if dx else -1.0) * (wy if dy else (1.0 - wy))
                    dwy = (wx if dx else (1.0 - wx)) * (1.0 if dy else -1.0)
                    dpx += gv * dwx
                    dpy += gv * dwy
                gf = np.stack([dpx * sx, dpy * sy], axis=1)
                f._accumulate(gf)
        out._backward = bw
    return out


def downsample_flow(f: Tensor, h_out: int, w_out: int) -> Tensor:
    """Average-pool a flow field to (h_out, w_out); normalized offsets are
    resolution independent so values keep their meaning."""
    n, c, h, w = f.shape
    if h % h_out or w % w_out:
        raise ShapeError(f"downsample_flow: {h}x{w} not divisible into {h_out}x{w_out}")
    fh, fw = h // h_out, w // w_out
    if fh != fw:
        raise ShapeError(f"downsample_flow: anisotropic factor {fh}x{fw}")
    from .tensor import avg_pool2d
    return f if fh == 1 else avg_pool2d(f, fh)


def normalize_target_features(pyramid: list[Tensor], f_y: Tensor) -> list[Tensor]:
    """Stage one of target alignment: warp every pyramid level by the pose
    normalization flow, pooled to match each level's resolution."""
    out = []
    for s in pyramid:
        fl = downsample_flow(f_y, s.shape[2], s.shape[3])
        out.append(bilinear_warp(s, fl))
    return out


def average_targets(sets: list[list[Tensor]]) -> list[Tensor]:
    """Per-level arithmetic mean of K warped pyramids."""
    if not sets:
        raise ShapeError("average_targets: no feature sets")
    n_levels = len(sets[0])
    for st in sets:
        if len(st) != n_levels:
            raise ShapeError("average_targets: pyramids have different depths")
    k = float(len(sets))
    out = []
    for j in range(n_levels):
        shapes = {st[j].shape for st in sets}
        if len(shapes) != 1:
            raise ShapeError(f"average_targets: level {j} shapes differ: {shapes}")
        acc = sets[0][j]
        for st in sets[1:]:
            acc = acc + st[j]
        out.append(acc * (1.0 / k))
    return out


def warp_alignment_block(u: Tensor, s_level: Tensor, flow_w: Tensor,
                         flow_b: Tensor, flow_scale: float = 2.0) -> Tensor:
    """Driver pose adaptation: estimate a flow from the decoder stream with a
    1x1 convolution, warp the averaged target level by it, and concatenate.

    Output channels = channels(u) + channels(s_level).
    """
    if u.shape[2:] != s_level.shape[2:]:
        raise ShapeError(f"warp_alignment_block: spatial mismatch {u.shape} vs {s_level.shape}")
    from .tensor import conv1x1
    f_u = conv1x1(u, flow_w, flow_b).tanh() * flow_scale
    warped = bilinear_warp(s_level, f_u)
    return concat_channels([u, warped])
