"""68-point 3-D landmark geometry.

Similarity normalization (orthogonal Procrustes), corpus decomposition into
mean / identity / expression offsets, grouped PCA expression bases with
whitened coefficients, expression transfer between identities, rasterization
to color-coded landmark images, and head-pose extraction.

Point index convention (0-based): contour 0-16, right eyebrow 17-21, left
eyebrow 22-26, nose 27-35, right eye 36-41, left eye 42-47, outer mouth
48-59, inner mouth 60-67. Coordinates follow image convention: x right,
y down, z toward the camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "N_POINTS", "PCA_GROUPS", "PCA_DIMS", "DRAW_GROUPS",
    "SimilarityTransform", "LandmarkCorpusStats", "ExpressionBasis",
    "normalize_landmark", "denormalize", "fit_normalization_template",
    "decompose_corpus", "fit_expression_basis", "project_expression",
    "reconstruct_expression", "transform_landmark", "rasterize",
    "head_pose_angles", "face_mask",
    "save_landmark_jsonl", "load_landmark_jsonl", "save_basis", "load_basis",
]

N_POINTS = 68

_CONTOUR = list(range(0, 17))
_R_BROW = list(range(17, 22))
_L_BROW = list(range(22, 27))
_NOSE = list(range(27, 36))
_R_EYE = list(range(36, 42))
_L_EYE = list(range(42, 48))
_OUT_MOUTH = list(range(48, 60))
_IN_MOUTH = list(range(60, 68))

# Five PCA groups: left eye, right eye, eyebrows, mouth, everything else.
PCA_GROUPS: dict[str, list[int]] = {
    "left_eye": _L_EYE,
    "right_eye": _R_EYE,
    "eyebrows": _R_BROW + _L_BROW,
    "mouth": _OUT_MOUTH + _IN_MOUTH,
    "other": _CONTOUR + _NOSE,
}
PCA_DIMS = (8, 8, 8, 16, 8)
N_EXP = sum(PCA_DIMS)

# Eight draw groups: (indices, closed?, RGB color).
DRAW_GROUPS = [
    (_L_EYE, True, (1.0, 0.0, 0.0)),
    (_R_EYE, True, (1.0, 0.0, 0.0)),
    (_CONTOUR, False, (0.0, 1.0, 0.0)),
    (_NOSE, False, (0.0, 0.0, 1.0)),
    (_L_BROW, False, (1.0, 1.0, 0.0)),
    (_R_BROW, False, (1.0, 1.0, 0.0)),
    (_IN_MOUTH, True, (0.0, 1.0, 1.0)),
    (_OUT_MOUTH, True, (0.0, 1.0, 1.0)),
]


def _check_landmark(l: np.ndarray) -> np.ndarray:
    l = np.asarray(l, dtype=np.float64)
    if l.shape != (N_POINTS, 3):
        raise ValueError(f"landmark must be {N_POINTS}x3, got {l.shape}")
    if not np.all(np.isfinite(l)):
        raise ValueError("landmark contains non-finite values")
    return l


@dataclass
class SimilarityTransform:
    """l = scale * rotation @ l_normalized + translation."""

    scale: float
    rotation: np.ndarray  # 3x3, orthonormal, det +1
    translation: np.ndarray  # 3-vector

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))


def normalize_landmark(l: np.ndarray, template: np.ndarray):
    """Least-squares similarity alignment of `l` onto `template`.

    Returns (l_bar, t) with l_bar = (1/s) R^T (l - translation), the
    orthogonal-Procrustes fit with reflection correction. The transform is
    exactly invertible by `denormalize`.
    """
    l = _check_landmark(l)
    template = _check_landmark(template)
    mu_l = l.mean(axis=0)
    mu_t = template.mean(axis=0)
    x = l - mu_l
    y = template - mu_t
    cov = x.T @ y / N_POINTS
    u, sv, vt = np.linalg.svd(cov)
    if sv[1] < 1e-12 * max(sv[0], 1e-300):
        raise ValueError("degenerate landmark configuration (rank-deficient covariance)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    s3 = np.diag([1.0, 1.0, d])
    r_align = vt.T @ s3 @ u.T  # rotates l-frame into template-frame
    var_x = float(np.mean(np.sum(x * x, axis=1)))
    s_align = float(np.trace(np.diag(sv) @ s3)) / var_x
    # l_bar = s_align * r_align @ (l - mu_l) + mu_t, rewritten as the
    # inverse form l_bar = (1/s) R^T (l - translation):
    scale = 1.0 / s_align
    rotation = r_align.T
    translation = mu_l - scale * (rotation @ mu_t)
    l_bar = s_align * (x @ r_align.T) + mu_t
    return l_bar, SimilarityTransform(scale, rotation, translation)


def denormalize(l_bar: np.ndarray, t: SimilarityTransform) -> np.ndarray:
    """Exact inverse of the normalization map."""
    l_bar = _check_landmark(l_bar)
    return t.scale * (l_bar @ t.rotation.T) + t.translation


def fit_normalization_template(frames: np.ndarray, iterations: int = 2) -> np.ndarray:
    """Canonical template from a stack of raw landmarks (F, 68, 3) by a short
    generalized-Procrustes pass: align everything onto a reference, average,
    repeat. Deterministic; the first frame seeds the reference."""
    frames = np.asarray(frames, dtype=np.float64)
    ref = frames[0]
    for _ in range(iterations):
        aligned = np.stack([normalize_landmark(f, ref)[0] for f in frames])
        ref = aligned.mean(axis=0)
    return ref


@dataclass
class LandmarkCorpusStats:
    mean_geometry: np.ndarray                    # (68, 3)
    identity_geometry: dict[str, np.ndarray]     # video id -> (68, 3)
    expression_offsets: dict[str, np.ndarray]    # video id -> (T, 68, 3)


def decompose_corpus(videos: dict[str, np.ndarray]) -> LandmarkCorpusStats:
    """Split normalized landmark videos into mean + identity + expression.

    The grand mean pools all frames (1/CT weighting); identity offsets are
    per-video means minus the grand mean; expression offsets are frames minus
    their video mean. Reconstruction is exact by construction.
    """
    if not videos:
        raise ValueError("decompose_corpus: empty corpus")
    keys = list(videos.keys())
    stacks = {}
    for k in keys:
        arr = np.asarray(videos[k], dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1:] != (N_POINTS, 3) or arr.shape[0] < 1:
            raise ValueError(f"video {k!r}: expected (T, 68, 3) with T >= 1, got {arr.shape}")
        stacks[k] = arr
    total = sum(s.shape[0] for s in stacks.values())
    grand = sum(s.sum(axis=0) for s in stacks.values()) / total
    identity = {}
    expression = {}
    for k in keys:
        vid_mean = stacks[k].mean(axis=0)
        identity[k] = vid_mean - grand
        expression[k] = stacks[k] - vid_mean
    return LandmarkCorpusStats(grand, identity, expression)


@dataclass
class ExpressionBasis:
    """Grouped orthonormal PCA bases with per-component stddevs folded in so
    projected coefficients are whitened."""

    bases: list[np.ndarray] = field(default_factory=list)    # (3*n_g, d_g) each
    stddevs: list[np.ndarray] = field(default_factory=list)  # (d_g,) each
    mean_landmark: np.ndarray | None = None

    @property
    def n_components(self) -> int:
        return sum(b.shape[1] for b in self.bases)

    def group_slices(self) -> list[slice]:
        out, start = [], 0
        for b in self.bases:
            out.append(slice(start, start + b.shape[1]))
            start += b.shape[1]
        return out


def _group_flatten(offsets: np.ndarray, idx: list[int]) -> np.ndarray:
    """(F, 68, 3) -> (F, 3*len(idx)) restricted to one group."""
    return offsets[:, idx, :].reshape(offsets.shape[0], -1)


def fit_expression_basis(stats: LandmarkCorpusStats,
                         dims: tuple[int, ...] = PCA_DIMS) -> ExpressionBasis:
    """Per-group PCA over expression offsets, eigenvalues descending.

    Components keep the sign convention that their largest-magnitude entry is
    positive; stddevs are sqrt-eigenvalues used for coefficient whitening.
    """
    all_exp = np.concatenate(list(stats.expression_offsets.values()), axis=0)
    n_frames = all_exp.shape[0]
    basis = ExpressionBasis(mean_landmark=stats.mean_geometry.copy())
    for (name, idx), d in zip(PCA_GROUPS.items(), dims):
        if n_frames <= d:
            raise ValueError(f"group {name!r}: {n_frames} frames cannot support {d} components")
        x = _group_flatten(all_exp, idx)
        cov = x.T @ x / n_frames
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:d]
        comp = evecs[:, order]
        ev = np.maximum(evals[order], 0.0)
        for j in range(d):
            k = np.argmax(np.abs(comp[:, j]))
            if comp[k, j] < 0:
                comp[:, j] = -comp[:, j]
        basis.bases.append(comp)
        basis.stddevs.append(np.sqrt(np.maximum(ev, 1e-24)))
    return basis


def project_expression(l_exp: np.ndarray, basis: ExpressionBasis) -> np.ndarray:
    """Whitened coefficients of one expression offset; shape (n_exp,)."""
    l_exp = _check_landmark(l_exp)
    parts = []
    for (idx, b, sd) in zip(PCA_GROUPS.values(), basis.bases, basis.stddevs):
        v = l_exp[idx, :].reshape(-1)
        parts.append((b.T @ v) / sd)
    return np.concatenate(parts)


def reconstruct_expression(alpha: np.ndarray, basis: ExpressionBasis,
                           lambda_exp: float = 1.5) -> np.ndarray:
    """Expression geometry from whitened coefficients, scaled by the
    expression intensity factor."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (basis.n_components,):
        raise ValueError(f"alpha must have length {basis.n_components}, got {alpha.shape}")
    out = np.zeros((N_POINTS, 3))
    for (idx, b, sd), sl in zip(
            zip(PCA_GROUPS.values(), basis.bases, basis.stddevs), basis.group_slices()):
        v = b @ (alpha[sl] * sd)
        out[idx, :] = v.reshape(len(idx), 3)
    return lambda_exp * out


def transform_landmark(target_ids: list[np.ndarray], driver_exp: np.ndarray,
                       mean_geometry: np.ndarray) -> np.ndarray:
    """Mean geometry + averaged target identity + driver expression."""
    if not target_ids:
        raise ValueError("transform_landmark: need at least one target identity estimate")
    ident = np.mean([_check_landmark(t) for t in target_ids], axis=0)
    return _check_landmark(mean_geometry) + ident + _check_landmark(driver_exp)


# ---------------------------------------------------------------------------
# rasterization / masks
# ---------------------------------------------------------------------------

def _draw_line(img: np.ndarray, p0, q0, color) -> None:
    """1-pixel Bresenham line with clipping; img is (3, h, w)."""
    h, w = img.shape[1:]
    x0, y0 = int(round(p0[0])), int(round(p0[1]))
    x1, y1 = int(round(q0[0])), int(round(q0[1]))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            img[:, y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize(l: np.ndarray, h: int, w: int) -> np.ndarray:
    """Orthographic XY projection drawn as colored polylines; (3, h, w) in
    [0, 1]. Eyes and mouths close into loops; other groups stay open chains.
    Points outside the canvas clip rather than fail."""
    if h < 32 or w < 32:
        raise ValueError(f"canvas must be at least 32x32, got {h}x{w}")
    l = _check_landmark(l)
    img = np.zeros((3, h, w))
    for idx, closed, color in DRAW_GROUPS:
        pts = l[idx, :2]
        n = len(idx)
        for i in range(n - 1):
            _draw_line(img, pts[i], pts[i + 1], color)
        if closed:
            _draw_line(img, pts[n - 1], pts[0], color)
    return img


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull of 2-D points, counter-clockwise."""
    pts = sorted(map(tuple, points))
    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out
    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def face_mask(l: np.ndarray, h: int, w: int) -> np.ndarray:
    """Filled convex hull of the projected landmarks; (h, w) binary."""
    l = _check_landmark(l)
    hull = _convex_hull(l[:, :2])
    mask = np.zeros((h, w))
    ys = hull[:, 1]
    y_lo = max(int(np.ceil(ys.min())), 0)
    y_hi = min(int(np.floor(ys.max())), h - 1)
    n = len(hull)
    for y in range(y_lo, y_hi + 1):
        xs = []
        for i in range(n):
            (x0, yy0), (x1, yy1) = hull[i], hull[(i + 1) % n]
            if (yy0 <= y < yy1) or (yy1 <= y < yy0):
                xs.append(x0 + (y - yy0) * (x1 - x0) / (yy1 - yy0))
        xs.sort()
        for a, b in zip(xs[::2], xs[1::2]):
            x_lo = max(int(np.ceil(a)), 0)
            x_hi = min(int(np.floor(b)), w - 1)
            if x_hi >= x_lo:
                mask[y, x_lo:x_hi + 1] = 1.0
    return mask


# ---------------------------------------------------------------------------
# head pose
# ---------------------------------------------------------------------------

def head_pose_angles(l: np.ndarray, template: np.ndarray):
    """Pose of `l` relative to the template as intrinsic Z-Y-X Euler angles
    (yaw, pitch, roll) in degrees, each in (-180, 180]. Returns a fourth
    boolean flag marking gimbal proximity (|pitch| > 89 degrees)."""
    _, t = normalize_landmark(l, template)
    r = t.rotation
    pitch = np.degrees(np.arcsin(np.clip(-r[2, 0], -1.0, 1.0)))
    yaw = np.degrees(np.arctan2(r[1, 0], r[0, 0]))
    roll = np.degrees(np.arctan2(r[2, 1], r[2, 2]))
    return yaw, pitch, roll, bool(abs(pitch) > 89.0)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_landmark_jsonl(path, records: list[tuple[str, int, np.ndarray]]) -> None:
    """Each record is (video, frame, points); one JSON object per line."""
    with open(path, "w") as f:
        for video, frame, points in records:
            pts = _check_landmark(points)
            f.write(json.dumps({"video": video, "frame": int(frame),
                                "points": pts.tolist()}) + "\n")


def load_landmark_jsonl(path) -> list[tuple[str, int, np.ndarray]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append((rec["video"], int(rec["frame"]),
                    _check_landmark(np.array(rec["points"]))))
    return out


def save_basis(path, basis: ExpressionBasis) -> None:
    from .checkpoint import save_checkpoint
    records = {}
    for i, (b, sd) in enumerate(zip(basis.bases, basis.stddevs)):
        records[f"group_{i}_basis"] = b
        records[f"group_{i}_stddev"] = sd
    records["mean_landmark"] = basis.mean_landmark
    save_checkpoint(path, records, version=2)


def load_basis(path) -> ExpressionBasis:
    from .checkpoint import load_checkpoint
    records, _ = load_checkpoint(path)
    basis = ExpressionBasis(mean_landmark=records["mean_landmark"])
    for i in range(len(PCA_DIMS)):
        basis.bases.append(records[f"group_{i}_basis"])
        basis.stddevs.append(records[f"group_{i}_stddev"])
    return basis
