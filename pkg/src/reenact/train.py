"""Training loops: the landmark disentangler (MSE on whitened expression
coefficients) and the full GAN (hinge losses, spectral norm, Adam), with
deterministic sampling and exact checkpoint resume.

All randomness is drawn from counter-based streams keyed by (seed, purpose,
step), so resuming needs only the step counter — no mutable RNG state is
ever persisted.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .checkpoint import load_checkpoint, save_checkpoint
from .landmarks import (ExpressionBasis, LandmarkCorpusStats, decompose_corpus,
                        face_mask, fit_expression_basis,
                        fit_normalization_template, normalize_landmark,
                        project_expression, rasterize, reconstruct_expression)
from .losses import (FeatureNet, LossWeights, feature_matching_loss,
                     generator_total_loss, hinge_d_loss, hinge_g_loss,
                     perceptual_loss)
from .networks import Discriminator, Disentangler, Generator, GeneratorConfig
from .optim import AdamState, adam_step, clip_grad_norm
from .synth import Corpus
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "parse_config_file", "LandmarkPipeline",
           "fit_landmark_pipeline", "DisentanglerResult", "train_disentangler",
           "estimate_landmark_parts", "GanResult", "train_gan",
           "save_gan_checkpoint", "load_gan_checkpoint",
           "save_pipeline", "load_pipeline",
           "save_disentangler", "load_disentangler", "config_from_file"]


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    image_size: int = 64
    n_targets: int = 4
    base_channels: int = 32
    max_channels: int = 512
    d_lr: float = 2e-4
    g_lr: float = 5e-5
    disentangler_lr: float = 3e-4
    grad_clip: float = 1.0
    d_updates_per_g: int = 1
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("seed", "checkpoint_every"):
                continue
            v = getattr(self, f.name)
            if v <= 0:
                raise ValueError(f"TrainConfig.{f.name} must be positive, got {v}")
        if self.checkpoint_every < 0:
            raise ValueError("TrainConfig.checkpoint_every must be >= 0")

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(image_size=self.image_size,
                               base_channels=self.base_channels,
                               max_channels=self.max_channels,
                               n_targets=self.n_targets)


def parse_config_file(path) -> dict:
    """Flat `name = value` lines; '#' comments and blank lines allowed."""
    out = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'name = value', got {raw!r}")
        name, value = (s.strip() for s in line.split("=", 1))
        if name not in types:
            raise ValueError(f"{path}:{lineno}: unknown config key {name!r}")
        out[name] = int(value) if types[name] in ("int", int) else float(value)
    return out


def config_from_file(path, **overrides) -> TrainConfig:
    values = parse_config_file(path)
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# Landmark pipeline: template + decomposition + PCA basis from one corpus.

@dataclass
class LandmarkPipeline:
    template: np.ndarray
    stats: LandmarkCorpusStats
    basis: ExpressionBasis


def fit_landmark_pipeline(corpus: Corpus, template_frames: int = 256) -> LandmarkPipeline:
    """Fit the normalization template on a frame subsample, normalize every
    frame, decompose into mean/identity/expression, and fit the PCA basis."""
    sample = []
    for clip in corpus.clips:
        sample.append(clip.landmarks[0])
        if len(sample) >= template_frames:
            break
    template = fit_normalization_template(np.stack(sample))
    videos = {}
    for clip in corpus.clips:
        videos[clip.name] = np.stack(
            [normalize_landmark(f, template)[0] for f in clip.landmarks])
    stats = decompose_corpus(videos)
    basis = fit_expression_basis(stats)
    return LandmarkPipeline(template=template, stats=stats, basis=basis)


def _disentangler_arrays(corpus: Corpus, pipe: LandmarkPipeline):
    """Per-frame training triples (uint8 image, centered landmark, whitened
    target coefficients) plus ground-truth generator coefficients."""
    images, lms, targets, alphas = [], [], [], []
    mean = pipe.basis.mean_landmark
    for clip in corpus.clips:
        if clip.images is None:
            raise ValueError(f"clip {clip.name!r} has no rendered frames")
        video_frames = np.stack(
            [normalize_landmark(f, pipe.template)[0] for f in clip.landmarks])
        video_mean = video_frames.mean(axis=0)
        for t in range(video_frames.shape[0]):
            l_bar = video_frames[t]
            images.append(clip.images[t])
            lms.append((l_bar - mean).reshape(-1))
            targets.append(project_expression(l_bar - video_mean, pipe.basis))
            # reloaded corpora carry no generation-time coefficients
            alphas.append(clip.alpha[t] if clip.alpha is not None
                          else np.full(48, np.nan))
    return (np.stack(images), np.stack(lms), np.stack(targets), np.stack(alphas))


@dataclass
class DisentanglerResult:
    model: Disentangler
    loss_curve: list[float]
    heldout_mse: float
    baseline_mse: float
    alpha_correlation: float


def _to_image_tensor(frames_u8: np.ndarray) -> Tensor:
    """uint8 (N, 3, h, w) -> float Tensor in [-1, 1]."""
    return Tensor(frames_u8.astype(np.float64) / 127.5 - 1.0)


def train_disentangler(train_corpus: Corpus, heldout_corpus: Corpus,
                       pipe: LandmarkPipeline, config: TrainConfig,
                       batch_size: int = 32) -> DisentanglerResult:
    """MSE regression of whitened expression coefficients from (frame,
    centered landmark) pairs; Adam at the configured rate with global
    gradient-norm clipping; held-out identities scored at the end."""
    if pipe.basis.n_components != 48:
        raise ValueError(f"basis has {pipe.basis.n_components} components, expected 48")
    imgs, lms, targets, _ = _disentangler_arrays(train_corpus, pipe)
    model = Disentangler(seed=config.seed, image_size=train_corpus.image_size)
    params = model.parameters()
    opt = AdamState(params, lr=config.disentangler_lr, beta1=0.9)
    n = imgs.shape[0]
    curve = []
    for step in range(config.steps):
        idx = rngmod.stream(config.seed, "disentangler", "batch", step).integers(0, n, batch_size)
        pred = model(_to_image_tensor(imgs[idx]), Tensor(lms[idx]))
        diff = pred - Tensor(targets[idx])
        loss = (diff * diff).mean()
        for p in params:
            p.grad = None
        backward(loss)
        clip_grad_norm([p.grad for p in params], config.grad_clip)
        adam_step(opt)
        curve.append(float(loss.data))

    h_imgs, h_lms, h_targets, h_alphas = _disentangler_arrays(heldout_corpus, pipe)
    preds = []
    for lo in range(0, h_imgs.shape[0], 256):
        sl = slice(lo, lo + 256)
        preds.append(model(_to_image_tensor(h_imgs[sl]), Tensor(h_lms[sl])).data)
    pred = np.concatenate(preds)
    mse = float(np.mean((pred - h_targets) ** 2))
    baseline = float(np.mean(h_targets ** 2))
    corr = _mean_abs_correlation(pred, h_alphas)
    return DisentanglerResult(model=model, loss_curve=curve, heldout_mse=mse,
                              baseline_mse=baseline, alpha_correlation=corr)


def _mean_abs_correlation(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean |corr| over coefficient dimensions; sign-agnostic because PCA
    components are determined only up to sign relative to the generator."""
    if not np.isfinite(truth).all():
        return float("nan")
    cs = []
    for k in range(pred.shape[1]):
        sp, st = np.std(pred[:, k]), np.std(truth[:, k])
        if sp < 1e-12 or st < 1e-12:
            cs.append(0.0)
            continue
        cs.append(abs(np.corrcoef(pred[:, k], truth[:, k])[0, 1]))
    return float(np.mean(cs))


def estimate_landmark_parts(model: Disentangler, image: np.ndarray,
                            l_bar: np.ndarray, basis: ExpressionBasis,
                            lambda_exp: float = 1.5):
    """Split one normalized landmark into estimated identity and expression
    parts: alpha = M(x, l_bar - l_m); l_exp = lambda * basis(alpha);
    l_id = l_bar - l_m - l_exp. The three parts always sum back to l_bar."""
    if image.dtype == np.uint8:
        img = _to_image_tensor(image[None])
    else:
        img = Tensor(np.asarray(image, dtype=np.float64)[None])
    centered = l_bar - basis.mean_landmark
    alpha = model(img, Tensor(centered.reshape(1, -1))).data[0]
    l_exp = reconstruct_expression(alpha, basis, lambda_exp)
    l_id = centered - l_exp
    return l_id, l_exp, alpha


def save_pipeline(path, pipe: LandmarkPipeline) -> None:
    """Template + PCA basis in one version-2 checkpoint (per-video stats are
    corpus-bound and not persisted)."""
    rec = {"template": pipe.template, "mean_landmark": pipe.basis.mean_landmark}
    for i, (b, sd) in enumerate(zip(pipe.basis.bases, pipe.basis.stddevs)):
        rec[f"group_{i}_basis"] = b
        rec[f"group_{i}_stddev"] = sd
    save_checkpoint(path, rec, version=2)


def load_pipeline(path) -> LandmarkPipeline:
    from .landmarks import PCA_DIMS
    rec, _ = load_checkpoint(path)
    basis = ExpressionBasis(mean_landmark=rec["mean_landmark"])
    for i in range(len(PCA_DIMS)):
        basis.bases.append(rec[f"group_{i}_basis"])
        basis.stddevs.append(rec[f"group_{i}_stddev"])
    return LandmarkPipeline(template=rec["template"], stats=None, basis=basis)


def save_disentangler(path, model: Disentangler) -> None:
    rec = {"meta.image_size": np.array(float(model.image_size))}
    for name, p in model.named_parameters("m.").items():
        rec[name] = p.data
    save_checkpoint(path, rec, version=2)


def load_disentangler(path, seed: int = 0) -> Disentangler:
    rec, _ = load_checkpoint(path)
    model = Disentangler(seed=seed, image_size=int(rec["meta.image_size"]))
    model.load_state(rec, "m.")
    return model


# ---------------------------------------------------------------------------
# GAN training.

@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    history: list[dict]
    l1_start: float
    l1_end: float
    checkpoint_path: Path | None


def _sample_step(corpus: Corpus, config: TrainConfig, step: int):
    """Deterministic per-step batch: for each element, one clip, one driver
    frame and K target frames from the same clip (without replacement when
    the clip is long enough)."""
    g = rngmod.stream(config.seed, "gan", "step", step)
    batch = []
    for _ in range(config.batch_size):
        clip = corpus.clips[int(g.integers(0, len(corpus.clips)))]
        n_frames = clip.landmarks.shape[0]
        need = 1 + config.n_targets
        if n_frames >= need:
            picks = g.choice(n_frames, size=need, replace=False)
        else:
            log.info("clip %s has %d frames < %d; sampling with replacement",
                     clip.name, n_frames, need)
            picks = g.integers(0, n_frames, size=need)
        batch.append((clip, int(picks[0]), [int(i) for i in picks[1:]]))
    return batch


def _gan_batch(corpus: Corpus, config: TrainConfig, step: int, id_index: dict):
    """Assemble (x, y, r_y, real, mask, class ids) arrays for one step."""
    s = config.image_size
    batch = _sample_step(corpus, config, step)
    x, y, ry, real, masks, cids = [], [], [], [], [], []
    for clip, dr, tgt in batch:
        lm_d = clip.landmarks[dr]
        x.append(rasterize(lm_d, s, s) * 2.0 - 1.0)
        real.append(clip.images[dr].astype(np.float64) / 127.5 - 1.0)
        masks.append(face_mask(lm_d, s, s))
        y.append([clip.images[t].astype(np.float64) / 127.5 - 1.0 for t in tgt])
        ry.append([rasterize(clip.landmarks[t], s, s) * 2.0 - 1.0 for t in tgt])
        cids.append(id_index[clip.identity])
    return (Tensor(np.stack(x)), Tensor(np.array(y)), Tensor(np.array(ry)),
            Tensor(np.stack(real)), np.stack(masks), np.array(cids))


def _optimizer_records(opt: AdamState, names: list[str], prefix: str) -> dict:
    rec = {f"{prefix}.step": np.array([float(opt.step)])}
    for name, m, v in zip(names, opt.m, opt.v):
        rec[f"{prefix}.m.{name}"] = m
        rec[f"{prefix}.v.{name}"] = v
    return rec


def _load_optimizer(opt: AdamState, names: list[str], prefix: str, rec: dict):
    opt.step = int(rec[f"{prefix}.step"][0])
    for i, name in enumerate(names):
        opt.m[i][...] = rec[f"{prefix}.m.{name}"]
        opt.v[i][...] = rec[f"{prefix}.v.{name}"]


def _spectral_records(module, prefix: str) -> dict:
    rec = {}
    for name, st in module.spectral_states().items():
        rec[f"{prefix}.{name}.u"] = st.u
        rec[f"{prefix}.{name}.v"] = st.v
    return rec


def _load_spectral(module, prefix: str, rec: dict):
    for name, st in module.spectral_states().items():
        st.u[...] = rec[f"{prefix}.{name}.u"]
        st.v[...] = rec[f"{prefix}.{name}.v"]


def save_gan_checkpoint(path, step: int, gen: Generator, disc: Discriminator,
                        opt_g: AdamState, opt_d: AdamState,
                        config: TrainConfig) -> None:
    """Version-2 (float64) checkpoint holding both networks, both optimizer
    states, spectral-norm vectors, and the step counter — everything needed
    for bit-exact resume."""
    rec = {"meta.step": np.array([float(step)]),
           "meta.n_identities": np.array([float(disc.n_identities)])}
    rec.update(gen.cfg.to_records())
    for name, p in gen.named_parameters("g.").items():
        rec[name] = p.data
    for name, p in disc.named_parameters("d.").items():
        rec[name] = p.data
    g_names = list(gen.named_parameters().keys())
    d_names = list(disc.named_parameters().keys())
    rec.update(_optimizer_records(opt_g, g_names, "adam_g"))
    rec.update(_optimizer_records(opt_d, d_names, "adam_d"))
    rec.update(_spectral_records(gen, "sn_g"))
    rec.update(_spectral_records(disc, "sn_d"))
    save_checkpoint(path, rec, version=2)


def load_gan_checkpoint(path, config: TrainConfig):
    """Rebuild (step, generator, discriminator, optimizers) from a training
    checkpoint written by save_gan_checkpoint."""
    rec, version = load_checkpoint(path)
    if version != 2:
        raise ValueError(f"{path}: expected a version-2 training checkpoint, got v{version}")
    gen_cfg = GeneratorConfig.from_records(rec)
    gen = Generator(gen_cfg, seed=config.seed)
    disc = Discriminator(gen_cfg, n_identities=int(rec["meta.n_identities"][0]),
                         seed=config.seed + 1)
    gen.load_state(rec, "g.")
    disc.load_state(rec, "d.")
    opt_g = AdamState(gen.parameters(), lr=config.g_lr)
    opt_d = AdamState(disc.parameters(), lr=config.d_lr)
    _load_optimizer(opt_g, list(gen.named_parameters().keys()), "adam_g", rec)
    _load_optimizer(opt_d, list(disc.named_parameters().keys()), "adam_d", rec)
    _load_spectral(gen, "sn_g", rec)
    _load_spectral(disc, "sn_d", rec)
    step = int(rec["meta.step"][0])
    return step, gen, disc, opt_g, opt_d


def _probe_l1(gen: Generator, corpus: Corpus, config: TrainConfig,
              id_index: dict) -> float:
    """Mean absolute pixel error of the generator on a fixed probe batch."""
    x, y, ry, real, _, _ = _gan_batch(corpus, config, -1, id_index)
    out = gen(x, y, ry)
    return float(np.mean(np.abs(out.data - real.data)))


def train_gan(corpus: Corpus, config: TrainConfig, out_dir=None,
              resume=None, log_file=None) -> GanResult:
    """Alternating hinge-GAN training on same-clip (driver, K-target) pairs.

    Each step runs one discriminator update (real and detached fake) and one
    generator update (adversarial + perceptual + masked perceptual + feature
    matching). Identity conditioning uses the corpus identity label; the two
    frozen perceptual networks are derived from the seed and never trained.
    """
    if any(c.images is None for c in corpus.clips):
        raise ValueError("GAN training needs rendered frames")
    id_index = {i: k for k, i in enumerate(sorted({c.identity for c in corpus.clips}))}
    start = 0
    if resume is not None:
        start, gen, disc, opt_g, opt_d = load_gan_checkpoint(resume, config)
    else:
        gen_cfg = config.generator_config()
        gen = Generator(gen_cfg, seed=config.seed)
        disc = Discriminator(gen_cfg, n_identities=len(id_index), seed=config.seed + 1)
        opt_g = AdamState(gen.parameters(), lr=config.g_lr)
        opt_d = AdamState(disc.parameters(), lr=config.d_lr)
    feat_p = FeatureNet(seed=config.seed + 101)
    feat_pf = FeatureNet(seed=config.seed + 202)
    g_params, d_params = gen.parameters(), disc.parameters()
    weights = LossWeights()

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    writer = None
    log_fh = None
    if log_file is not None:
        fresh = start == 0 or not Path(log_file).exists()
        log_fh = open(log_file, "a")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(["step", "d_loss", "g_loss", "l_p", "l_pf", "l_fm"])

    l1_start = _probe_l1(gen, corpus, config, id_index) if start == 0 else float("nan")
    history = []
    t0 = time.time()
    try:
        for step in range(start, config.steps):
            x, y, ry, real, masks, cids = _gan_batch(corpus, config, step, id_index)

            # Discriminator update on real and detached fake.
            for p in g_params + d_params:
                p.grad = None
            fake = gen(x, y, ry)
            s_real, _ = disc(real, x, cids)
            s_fake, _ = disc(fake.detach(), x, cids)
            d_loss = hinge_d_loss(s_real, s_fake)
            backward(d_loss)
            adam_step(opt_d)

            # Generator update; discriminator grads from this pass are dropped.
            for p in g_params + d_params:
                p.grad = None
            _, taps_real = disc(real, x, cids)
            s_fake_g, taps_fake = disc(fake, x, cids)
            l_gan = hinge_g_loss(s_fake_g)
            l_p = perceptual_loss(real, fake, None, feat_p)
            l_pf = perceptual_loss(real, fake, masks, feat_pf)
            l_fm = feature_matching_loss(taps_real, taps_fake)
            g_loss = generator_total_loss(l_gan, l_p, l_pf, l_fm, weights)
            backward(g_loss)
            adam_step(opt_g)

            row = {"step": step, "d_loss": float(d_loss.data),
                   "g_loss": float(g_loss.data), "l_p": float(l_p.data),
                   "l_pf": float(l_pf.data), "l_fm": float(l_fm.data)}
            history.append(row)
            if writer is not None:
                writer.writerow([row["step"]] + [f"{row[k]:.10g}" for k in
                                                 ("d_loss", "g_loss", "l_p", "l_pf", "l_fm")])
            if not all(np.isfinite(v) for v in row.values()):
                raise FloatingPointError(f"non-finite loss at step {step}: {row}")
            done = step + 1
            if out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                save_gan_checkpoint(out_dir / f"gan_{done:06d}.ckpt", done,
                                    gen, disc, opt_g, opt_d, config)
            if done % 50 == 0:
                log.info("step %d/%d d=%.4f g=%.4f (%.1fs)", done, config.steps,
                         row["d_loss"], row["g_loss"], time.time() - t0)
    finally:
        if log_fh is not None:
            log_fh.close()

    l1_end = _probe_l1(gen, corpus, config, id_index)
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "gan_final.ckpt"
        save_gan_checkpoint(ckpt, config.steps, gen, disc, opt_g, opt_d, config)
    return GanResult(generator=gen, discriminator=disc, history=history,
                     l1_start=l1_start, l1_end=l1_end, checkpoint_path=ckpt)
