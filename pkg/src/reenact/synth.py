"""Procedural synthetic landmark-video corpus with analytic ground truth.

Each identity is a smooth offset from a hand-built canonical 68-point face
template plus a deterministic color palette. Each clip carries per-frame
expression coefficients (stationary unit-variance AR(1) streams over known
orthonormal per-group modes, mean-removed per clip so the decomposition
identities hold exactly) and a rigid pose. Frames render as the rasterized
landmark over an identity-colored background gradient and face fill, so
identity is recoverable from appearance alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .landmarks import (N_POINTS, PCA_DIMS, PCA_GROUPS, face_mask, rasterize,
                        save_landmark_jsonl)

__all__ = ["canonical_template", "make_expression_modes", "ExpressionModes",
           "SyntheticIdentity", "SyntheticClip", "Corpus", "generate_corpus",
           "corpus_split", "save_corpus", "load_corpus", "render_frame"]


def canonical_template() -> np.ndarray:
    """Canonical 68-point face in image convention (x right, y down, z toward
    the camera), spanning roughly [-0.5, 0.5]."""
    t = np.zeros((N_POINTS, 3))
    # contour 0-16: U-shaped jaw line, temples to chin and back
    th = np.pi * np.arange(17) / 16.0
    t[0:17, 0] = -0.45 * np.cos(th)
    t[0:17, 1] = -0.05 + 0.55 * np.sin(th)
    t[0:17, 2] = -0.12 + 0.17 * np.sin(th)
    # eyebrows 17-21 (subject right) and 22-26 (subject left)
    j = np.arange(5)
    t[17:22, 0] = -0.35 + 0.25 * j / 4.0
    t[22:27, 0] = 0.10 + 0.25 * j / 4.0
    for s in (slice(17, 22), slice(22, 27)):
        t[s, 1] = -0.25 - 0.04 * np.sin(np.pi * j / 4.0)
        t[s, 2] = 0.02
    # nose 27-35: bridge then base
    jb = np.arange(4)
    t[27:31, 1] = -0.18 + 0.09 * jb
    t[27:31, 2] = 0.08 + 0.03 * jb
    j5 = np.arange(5)
    t[31:36, 0] = -0.08 + 0.04 * j5
    t[31:36, 1] = 0.14
    t[31:36, 2] = 0.10
    # eyes 36-41 (right) and 42-47 (left): 6-point ellipses
    ph6 = 2.0 * np.pi * np.arange(6) / 6.0
    for s, cx in ((slice(36, 42), -0.18), (slice(42, 48), 0.18)):
        t[s, 0] = cx + 0.07 * np.cos(ph6)
        t[s, 1] = -0.14 + 0.035 * np.sin(ph6)
        t[s, 2] = 0.02
    # mouth 48-59 outer, 60-67 inner
    ph12 = 2.0 * np.pi * np.arange(12) / 12.0
    t[48:60, 0] = 0.16 * np.cos(ph12)
    t[48:60, 1] = 0.25 + 0.08 * np.sin(ph12)
    t[48:60, 2] = 0.05
    ph8 = 2.0 * np.pi * np.arange(8) / 8.0
    t[60:68, 0] = 0.09 * np.cos(ph8)
    t[60:68, 1] = 0.25 + 0.035 * np.sin(ph8)
    t[60:68, 2] = 0.05
    return t


@dataclass
class ExpressionModes:
    """Ground-truth generative basis: per-group orthonormal mode matrices
    (3*n_g, d_g) and per-component generation stddevs."""

    modes: list[np.ndarray]
    stddevs: list[np.ndarray]

    def offset(self, alpha: np.ndarray) -> np.ndarray:
        """(48,) coefficients -> (68, 3) expression offset."""
        out = np.zeros((N_POINTS, 3))
        start = 0
        for idx, m, sd in zip(PCA_GROUPS.values(), self.modes, self.stddevs):
            d = m.shape[1]
            v = m @ (alpha[start:start + d] * sd)
            out[idx, :] = v.reshape(len(idx), 3)
            start += d
        return out


_GROUP_AMPLITUDE = {"left_eye": 0.020, "right_eye": 0.020, "eyebrows": 0.020,
                    "mouth": 0.040, "other": 0.015}


def _similarity_tangent(template: np.ndarray) -> np.ndarray:
    """Orthonormal basis (204, 7) of first-order similarity motions of the
    template: 3 translations, 3 rotations, 1 scaling. Offsets generated
    orthogonal to this space carry no rigid component, so pose application
    followed by Procrustes normalization recovers them to second order."""
    c = template - template.mean(axis=0)
    cols = []
    for axis in range(3):
        t = np.zeros((N_POINTS, 3))
        t[:, axis] = 1.0
        cols.append(t.reshape(-1))
    gens = [np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]]),
            np.array([[0, 0, 1], [0, 0, 0], [-1, 0, 0]]),
            np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]])]
    for g in gens:
        cols.append((c @ g.T).reshape(-1))
    cols.append(c.reshape(-1))
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q


def _project_out(vecs: np.ndarray, span: np.ndarray) -> np.ndarray:
    """Remove from each column of `vecs` its component in the column span of
    `span` (columns need not be orthonormal)."""
    q, r = np.linalg.qr(span)
    keep = np.abs(np.diag(r)) > 1e-10
    q = q[:, keep]
    return vecs - q @ (q.T @ vecs)


def _smooth_columns(n_pts: int, n_cols: int, rng: np.random.Generator) -> np.ndarray:
    """(3*n_pts, n_cols) random low-frequency patterns over point index."""
    p = np.arange(n_pts)
    freqs = np.arange(4)
    cols = np.zeros((3 * n_pts, n_cols))
    for c in range(n_cols):
        pat = np.zeros((n_pts, 3))
        for axis in range(3):
            coef = rng.standard_normal(len(freqs))
            phase = rng.uniform(0, 2 * np.pi, len(freqs))
            for f, cf, ph in zip(freqs, coef, phase):
                pat[:, axis] += cf * np.cos(np.pi * f * (p + 0.5) / n_pts + ph)
        cols[:, c] = pat.reshape(-1)
    return cols


def make_expression_modes(seed: int, exp_scale: float = 1.0) -> ExpressionModes:
    """Per-group orthonormal smooth modes with dims matching the PCA layout
    and geometrically decaying generation stddevs."""
    template = canonical_template()
    tangent = _similarity_tangent(template)
    modes, stds = [], []
    for (name, idx), d in zip(PCA_GROUPS.items(), PCA_DIMS):
        rng = rngmod.stream(seed, "modes", name)
        raw = _smooth_columns(len(idx), d, rng)
        rows = np.array([[3 * p + a for p in idx for a in range(3)]]).reshape(-1)
        raw = _project_out(raw, tangent[rows, :])
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))
        for k in range(d):
            if q[np.argmax(np.abs(q[:, k])), k] < 0:
                q[:, k] = -q[:, k]
        modes.append(q[:, :d])
        stds.append(exp_scale * _GROUP_AMPLITUDE[name] * 0.9 ** np.arange(d))
    return ExpressionModes(modes, stds)


@dataclass
class SyntheticIdentity:
    offset: np.ndarray        # (68, 3) deviation in canonical units
    appearance_seed: int


@dataclass
class SyntheticClip:
    name: str
    identity: int
    alpha: np.ndarray             # (T, 48) ground-truth coefficients
    pose: list[tuple]             # per frame (scale, R, t)
    landmarks_gt: np.ndarray      # (T, 68, 3) pre-pose, canonical units
    landmarks: np.ndarray         # (T, 68, 3) posed, pixel units
    images: np.ndarray | None     # (T, 3, h, w) uint8, None until rendered


@dataclass
class Corpus:
    template: np.ndarray
    modes: ExpressionModes | None
    identities: list[SyntheticIdentity]
    clips: list[SyntheticClip]
    image_size: int
    seed: int
    meta: dict = field(default_factory=dict)

    def frames(self) -> int:
        return sum(c.landmarks.shape[0] for c in self.clips)


def _identity_offsets(n: int, seed: int, id_scale: float) -> list[np.ndarray]:
    """Smooth offsets paired as +d/-d so the population mean is zero; an odd
    count gets one zero offset."""
    out = []
    tangent = _similarity_tangent(canonical_template())
    n_pairs = n // 2
    for i in range(n_pairs):
        rng = rngmod.stream(seed, "identity", i)
        d = _smooth_columns(N_POINTS, 1, rng)
        d = _project_out(d, tangent)[:, 0].reshape(N_POINTS, 3)
        d *= id_scale * 0.015 / max(np.std(d), 1e-12)
        out.extend([d, -d])
    if n % 2:
        out.append(np.zeros((N_POINTS, 3)))
    return out


def _euler(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cz, sz = np.cos(yaw), np.sin(yaw)
    cy, sy = np.cos(pitch), np.sin(pitch)
    cx, sx = np.cos(roll), np.sin(roll)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


def render_frame(landmark_px: np.ndarray, appearance_seed: int, h: int, w: int) -> np.ndarray:
    """(3, h, w) uint8: identity-colored gradient + face fill + landmark lines."""
    rng = rngmod.stream(appearance_seed, "palette")
    c00, c01, c10, c11 = rng.uniform(0.1, 0.9, (4, 3))
    face_color = rng.uniform(0.2, 0.95, 3)
    ry = np.linspace(0.0, 1.0, h)[:, None]
    rx = np.linspace(0.0, 1.0, w)[None, :]
    img = np.zeros((3, h, w))
    for ch in range(3):
        img[ch] = (c00[ch] * (1 - ry) * (1 - rx) + c01[ch] * (1 - ry) * rx
                   + c10[ch] * ry * (1 - rx) + c11[ch] * ry * rx)
    mask = face_mask(landmark_px, h, w)
    img = img * (1.0 - 0.65 * mask) + 0.65 * face_color[:, None, None] * mask
    lines = rasterize(landmark_px, h, w)
    lit = lines.max(axis=0) > 0
    img = np.where(lit, lines, img)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_corpus(n_identities: int, clips_per_id: int, frames_per_clip: int,
                    seed: int, image_size: int = 64, exp_scale: float = 1.0,
                    id_scale: float = 1.0, pose_scale: float = 1.0,
                    render: bool = True, ar_factor: float = 0.7) -> Corpus:
    """Deterministic corpus; identical arguments give bit-identical output."""
    if min(n_identities, clips_per_id, frames_per_clip) < 1:
        raise ValueError("corpus counts must all be >= 1")
    template = canonical_template()
    modes = make_expression_modes(seed, exp_scale)
    offsets = _identity_offsets(n_identities, seed, id_scale)
    identities = [SyntheticIdentity(off, seed * 1000003 + i)
                  for i, off in enumerate(offsets)]
    clips = []
    rho = ar_factor
    innov = np.sqrt(1.0 - rho * rho)
    for ident in range(n_identities):
        for k in range(clips_per_id):
            rng = rngmod.stream(seed, "clip", ident, k)
            # stationary AR(1) coefficients, unit marginal variance
            alpha = np.zeros((frames_per_clip, 48))
            a = rng.standard_normal(48)
            for tfr in range(frames_per_clip):
                alpha[tfr] = a
                a = rho * a + innov * rng.standard_normal(48)
            alpha -= alpha.mean(axis=0, keepdims=True)  # exact per-clip zero mean
            lm_gt = np.stack([template + identities[ident].offset + modes.offset(al)
                              for al in alpha])
            # rigid pose: base orientation plus smooth per-frame wander
            base = rng.uniform(-30.0, 30.0, 3) * pose_scale
            wander = rng.uniform(-10.0, 10.0, (frames_per_clip, 3)) * pose_scale
            ang = np.clip(base[None, :] + wander, -45.0, 45.0)
            scale = image_size * rng.uniform(0.38, 0.48)
            cx = image_size / 2.0 + rng.uniform(-0.04, 0.04) * image_size
            cy = image_size / 2.0 + rng.uniform(-0.04, 0.04) * image_size
            pose, lm_px = [], np.zeros_like(lm_gt)
            for tfr in range(frames_per_clip):
                r = _euler(*np.radians(ang[tfr]))
                t = np.array([cx, cy, 0.0])
                pose.append((scale, r, t))
                lm_px[tfr] = scale * (lm_gt[tfr] @ r.T) + t
            images = None
            if render:
                images = np.stack([render_frame(lm_px[tfr],
                                                identities[ident].appearance_seed,
                                                image_size, image_size)
                                   for tfr in range(frames_per_clip)])
            clips.append(SyntheticClip(f"id{ident:04d}_clip{k:02d}", ident, alpha,
                                       pose, lm_gt, lm_px, images))
    return Corpus(template, modes, identities, clips, image_size, seed,
                  meta={"n_identities": n_identities, "clips_per_id": clips_per_id,
                        "frames_per_clip": frames_per_clip})


def corpus_split(corpus: Corpus, train_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Identity-disjoint deterministic split into (train, held-out)."""
    n = len(corpus.identities)
    if n < 2:
        raise ValueError("corpus_split needs at least 2 identities")
    if not (0.0 < train_fraction < 1.0):
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = rngmod.stream(seed, "split").permutation(n)
    n_train = max(1, min(n - 1, int(round(train_fraction * n))))
    train_ids = set(order[:n_train].tolist())
    def subset(keep: set) -> Corpus:
        return Corpus(corpus.template, corpus.modes, corpus.identities,
                      [c for c in corpus.clips if c.identity in keep],
                      corpus.image_size, corpus.seed, dict(corpus.meta))
    return subset(train_ids), subset(set(range(n)) - train_ids)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir) -> None:
    """Manifest JSON + landmark JSON-lines + per-frame binary PPM images."""
    from .imageio import write_ppm
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    manifest = {"seed": corpus.seed, "image_size": corpus.image_size,
                **corpus.meta,
                "clips": [{"name": c.name, "identity": c.identity,
                           "frames": int(c.landmarks.shape[0])} for c in corpus.clips]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    for clip in corpus.clips:
        cdir = out / "images" / clip.name
        cdir.mkdir(parents=True, exist_ok=True)
        for tfr in range(clip.landmarks.shape[0]):
            records.append((clip.name, tfr, clip.landmarks[tfr]))
            if clip.images is not None:
                write_ppm(cdir / f"frame{tfr:04d}.ppm", clip.images[tfr])
    save_landmark_jsonl(out / "landmarks.jsonl", records)


def load_corpus(in_dir) -> Corpus:
    """Rebuild a corpus from files; generation-time ground truth (modes,
    coefficients, pre-pose landmarks) is not stored and comes back empty."""
    from .imageio import read_ppm
    from .landmarks import load_landmark_jsonl
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    by_clip: dict[str, dict[int, np.ndarray]] = {}
    for video, frame, pts in load_landmark_jsonl(root / "landmarks.jsonl"):
        by_clip.setdefault(video, {})[frame] = pts
    clips = []
    n_ids = 0
    for entry in manifest["clips"]:
        name, ident, n_frames = entry["name"], entry["identity"], entry["frames"]
        n_ids = max(n_ids, ident + 1)
        lm = np.stack([by_clip[name][t] for t in range(n_frames)])
        img_dir = root / "images" / name
        images = None
        if img_dir.is_dir():
            frames = [read_ppm(img_dir / f"frame{t:04d}.ppm") for t in range(n_frames)]
            images = np.stack([np.clip(np.round(f * 255), 0, 255).astype(np.uint8)
                               for f in frames])
        clips.append(SyntheticClip(name, ident, None, [], None, lm, images))
    identities = [SyntheticIdentity(np.zeros((N_POINTS, 3)),
                                    manifest["seed"] * 1000003 + i)
                  for i in range(n_ids)]
    return Corpus(canonical_template(), None, identities, clips,
                  manifest["image_size"], manifest["seed"],
                  {k: manifest[k] for k in ("n_identities", "clips_per_id",
                                            "frames_per_clip") if k in manifest})
