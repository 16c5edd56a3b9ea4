"""Image attention over target feature maps, and the three-block blender.

The driver feature map queries; keys and values come from all K target maps
jointly, flattened along one key axis so the softmax normalizes across
targets and positions at once. Sinusoidal 2-D positional encodings are added
to queries and keys inside every block.
"""

from __future__ import annotations

import numpy as np

from .tensor import (ShapeError, Tensor, conv2d, instance_norm, linear,
                     matmul, softmax_lastdim)

__all__ = ["positional_encoding", "AttentionBlockParams", "image_attention",
           "attention_block", "blender", "export_attention_map", "write_pgm"]


def positional_encoding(h: int, w: int, c: int) -> np.ndarray:
    """(h, w, c) sinusoid grid; channels 4k / 4k+1 carry sin / cos of the
    scaled vertical index, 4k+2 / 4k+3 the horizontal, with the coordinate
    normalized as 256*i/h (resp. 256*j/w)."""
    if c % 4 != 0:
        raise ValueError(f"positional encoding channels must be divisible by 4, got {c}")
    p = np.zeros((h, w, c))
    i = np.arange(h, dtype=np.float64)[:, None]
    j = np.arange(w, dtype=np.float64)[None, :]
    for k in range(c // 4):
        denom = 10000.0 ** (2.0 * k / c)
        vi = 256.0 * i / (h * denom)
        vj = 256.0 * j / (w * denom)
        p[:, :, 4 * k] = np.sin(vi)
        p[:, :, 4 * k + 1] = np.cos(vi)
        p[:, :, 4 * k + 2] = np.sin(vj)
        p[:, :, 4 * k + 3] = np.cos(vj)
    return p


class AttentionBlockParams:
    """Projections and post-attention convolution for one block.

    w_q, w_qp: (c_x, c_a); w_k, w_kp: (c_y, c_a); w_v: (c_y, c_x);
    conv_w: (c_x, c_x, 3, 3), conv_b: (c_x,).
    """

    def __init__(self, w_q, w_qp, w_k, w_kp, w_v, conv_w, conv_b):
        self.w_q, self.w_qp = w_q, w_qp
        self.w_k, self.w_kp = w_k, w_kp
        self.w_v = w_v
        self.conv_w, self.conv_b = conv_w, conv_b

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_qp, self.w_k, self.w_kp, self.w_v,
                self.conv_w, self.conv_b]


def _scores(z_x: Tensor, z_y: Tensor, params: AttentionBlockParams):
    """Raw attention logits (N, hx*wx, K*hy*wy) plus the flattened values."""
    if z_x.data.ndim != 4 or z_y.data.ndim != 5:
        raise ShapeError(f"attention expects NCHW driver and NKCHW targets, "
                         f"got {z_x.shape} and {z_y.shape}")
    n, c_x, h_x, w_x = z_x.shape
    nk, k, c_y, h_y, w_y = z_y.shape
    if nk != n:
        raise ShapeError(f"attention batch mismatch: {n} vs {nk}")
    if params.w_q.shape[0] != c_x or params.w_k.shape[0] != c_y:
        raise ShapeError(f"attention channel mismatch: driver {c_x}/targets {c_y} vs "
                         f"projections {params.w_q.shape} / {params.w_k.shape}")
    c_a = params.w_q.shape[1]

    p_x = Tensor(positional_encoding(h_x, w_x, c_x).reshape(-1, c_x))
    p_y = Tensor(positional_encoding(h_y, w_y, c_y).reshape(-1, c_y))

    q_in = z_x.transpose(0, 2, 3, 1).reshape(n, h_x * w_x, c_x)
    q = linear(q_in, params.w_q) + matmul(p_x, params.w_qp)

    k_in = z_y.transpose(0, 1, 3, 4, 2).reshape(n, k * h_y * w_y, c_y)
    pk = matmul(p_y, params.w_kp)  # same encoding for every target map
    keys = linear(k_in, params.w_k) + _tile_targets(pk, k)
    values = linear(k_in, params.w_v)

    logits = matmul(q, keys.transpose(0, 2, 1)) * (1.0 / np.sqrt(c_a))
    return logits, values, (n, c_x, h_x, w_x)


def _tile_targets(pk: Tensor, k: int) -> Tensor:
    """(hy*wy, c) -> (k*hy*wy, c) by stacking k copies."""
    from .tensor import concat
    return pk if k == 1 else concat([pk] * k, axis=0)


def image_attention(z_x: Tensor, z_y: Tensor, params: AttentionBlockParams) -> Tensor:
    """Scaled dot-product attention of driver queries over all target
    positions; output reshaped back to the driver layout (N, c_x, h_x, w_x)."""
    logits, values, (n, c_x, h_x, w_x) = _scores(z_x, z_y, params)
    attn = softmax_lastdim(logits)
    out = matmul(attn, values)  # (n, hx*wx, c_x)
    return out.reshape(n, h_x, w_x, c_x).transpose(0, 3, 1, 2)


def attention_block(z_x: Tensor, z_y: Tensor, params: AttentionBlockParams) -> Tensor:
    """Residual add, instance norm, then a 3x3 convolution after attention."""
    a = image_attention(z_x, z_y, params)
    return conv2d(instance_norm(z_x + a), params.conv_w, params.conv_b)


def blender(z_x: Tensor, z_y: Tensor, blocks: list[AttentionBlockParams]) -> Tensor:
    """Stack of attention blocks, each attending to the same target maps."""
    z = z_x
    for p in blocks:
        z = attention_block(z, z_y, p)
    return z


def export_attention_map(z_x: Tensor, z_y: Tensor, params: AttentionBlockParams,
                         query_position: tuple[int, int]) -> np.ndarray:
    """Softmax weights of one query over every target position, (K, hy, wy);
    rows sum to 1."""
    qi, qj = query_position
    n, c_x, h_x, w_x = z_x.shape
    if not (0 <= qi < h_x and 0 <= qj < w_x):
        raise ValueError(f"query position {query_position} outside {h_x}x{w_x} grid")
    logits, _, _ = _scores(z_x, z_y, params)
    attn = softmax_lastdim(logits)
    k, h_y, w_y = z_y.shape[1], z_y.shape[3], z_y.shape[4]
    row = attn.data[0, qi * w_x + qj]
    return row.reshape(k, h_y, w_y)


def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit binary PGM; input values in [0, 1] (scaled by the max weight)."""
    gray = np.asarray(gray, dtype=np.float64)
    peak = gray.max()
    if peak > 0:
        gray = gray / peak
    img = np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())
