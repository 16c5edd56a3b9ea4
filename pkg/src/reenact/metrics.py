"""Image and pose evaluation metrics: PSNR, SSIM, masked variants, PRMSE.

All image metrics operate on float arrays in [0, 1] with shape (h, w) or
(h, w, 3); multi-channel inputs are scored per channel and averaged.
"""

from __future__ import annotations

import numpy as np

__all__ = ["psnr", "ssim", "masked_psnr", "masked_ssim", "prmse", "prmse_landmarks"]

_PSNR_CAP = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _as_channels(img: np.ndarray) -> np.ndarray:
    """Return a (h, w, c) view of a (h, w) or (h, w, c) image."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[:, :, None]
    if a.ndim == 3:
        return a
    raise ValueError(f"expected (h, w) or (h, w, c) image, got shape {a.shape}")


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xa, xb = _as_channels(a), _as_channels(b)
    if xa.shape != xb.shape:
        raise ValueError(f"image shapes differ: {xa.shape} vs {xb.shape}")
    return xa, xb


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Returns 100 dB when the mean squared error is below 1e-10 (identical or
    nearly identical images), avoiding infinities in reports.
    """
    xa, xb = _check_pair(a, b)
    mse = float(np.mean((xa - xb) ** 2))
    if mse < 1e-10:
        return _PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def masked_psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """PSNR computed only over pixels where ``mask`` is nonzero."""
    xa, xb = _check_pair(a, b)
    m = np.asarray(mask, dtype=bool)
    if m.shape != xa.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {xa.shape[:2]}")
    if not m.any():
        raise ValueError("mask selects no pixels")
    mse = float(np.mean((xa[m] - xb[m]) ** 2))
    if mse < 1e-10:
        return _PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _windows(x: np.ndarray, size: int) -> np.ndarray:
    """All valid size x size windows of a 2D array, shape (h', w', size, size)."""
    return np.lib.stride_tricks.sliding_window_view(x, (size, size))


def _ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-window SSIM values for one channel (valid windows only)."""
    k = _gaussian_kernel()
    wa = _windows(a, _SSIM_WINDOW)
    wb = _windows(b, _SSIM_WINDOW)
    mu_a = np.einsum("ijkl,kl->ij", wa, k)
    mu_b = np.einsum("ijkl,kl->ij", wb, k)
    e_aa = np.einsum("ijkl,kl->ij", wa * wa, k)
    e_bb = np.einsum("ijkl,kl->ij", wb * wb, k)
    e_ab = np.einsum("ijkl,kl->ij", wa * wb, k)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Only fully valid windows enter the mean (no padding), so images must be
    at least 11 pixels on each side.
    """
    xa, xb = _check_pair(a, b)
    if min(xa.shape[:2]) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW}x{_SSIM_WINDOW} for SSIM")
    vals = [float(np.mean(_ssim_map(xa[:, :, c], xb[:, :, c])))
            for c in range(xa.shape[2])]
    return float(np.mean(vals))


def masked_ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """SSIM averaged over windows whose center pixel lies inside the mask."""
    xa, xb = _check_pair(a, b)
    if min(xa.shape[:2]) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW}x{_SSIM_WINDOW} for SSIM")
    m = np.asarray(mask, dtype=bool)
    if m.shape != xa.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {xa.shape[:2]}")
    half = _SSIM_WINDOW // 2
    centers = m[half:m.shape[0] - half, half:m.shape[1] - half]
    if not centers.any():
        raise ValueError("mask selects no interior window centers")
    vals = [float(np.mean(_ssim_map(xa[:, :, c], xb[:, :, c])[centers]))
            for c in range(xa.shape[2])]
    return float(np.mean(vals))


def prmse(pred_angles: np.ndarray, true_angles: np.ndarray) -> float:
    """Root-mean-square pose error in degrees.

    Inputs are (n, 3) arrays of (yaw, pitch, roll) per frame; the per-frame
    error is the Euclidean norm of the angle difference.
    """
    p = np.asarray(pred_angles, dtype=np.float64)
    t = np.asarray(true_angles, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected matching (n, 3) angle arrays, got {p.shape} and {t.shape}")
    per_frame = np.sum((p - t) ** 2, axis=1)
    return float(np.sqrt(np.mean(per_frame)))


def prmse_landmarks(pred_landmarks: np.ndarray, true_landmarks: np.ndarray,
                    template: np.ndarray) -> float:
    """PRMSE between two landmark sequences of shape (n, 68, 3).

    Head pose per frame comes from the Procrustes fit against ``template``;
    gimbal-flagged frames still contribute their angle estimates.
    """
    from .landmarks import head_pose_angles

    p = np.asarray(pred_landmarks, dtype=np.float64)
    t = np.asarray(true_landmarks, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 3 or p.shape[1:] != (68, 3):
        raise ValueError(f"expected matching (n, 68, 3) sequences, got {p.shape} and {t.shape}")
    pa = np.array([head_pose_angles(f, template)[:3] for f in p])
    ta = np.array([head_pose_angles(f, template)[:3] for f in t])
    return prmse(pa, ta)
