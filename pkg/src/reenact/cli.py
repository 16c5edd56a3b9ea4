"""Command-line surface: corpus generation, pipeline fitting, training,
reenactment, evaluation, and checkpoint inspection.

Every command accepts --seed, --config (flat `name = value` training
settings), and writes its artifacts under --out. Unknown commands or flags
exit with status 2 (argparse usage error); failed preconditions exit with
status 1 and a named cause on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attention import export_attention_map, write_pgm
from .checkpoint import load_checkpoint
from .imageio import read_ppm, write_ppm
from .landmarks import (denormalize, face_mask, load_landmark_jsonl,
                        normalize_landmark, rasterize, save_landmark_jsonl)
from .metrics import masked_psnr, masked_ssim, prmse_landmarks, psnr, ssim
from .networks import Generator, GeneratorConfig
from .synth import corpus_split, generate_corpus, load_corpus, save_corpus
from .tensor import Tensor
from .train import (TrainConfig, estimate_landmark_parts, fit_landmark_pipeline,
                    load_disentangler, load_gan_checkpoint, load_pipeline,
                    parse_config_file, save_disentangler, save_pipeline,
                    train_disentangler, train_gan)

log = logging.getLogger(__name__)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None,
                   help="flat 'name = value' training-config file")
    p.add_argument("--out", type=Path, required=out_required,
                   help="output directory")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reenact",
                                 description="few-shot face reenactment toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _common(p)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--clips-per-id", type=int, default=1)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--exp-scale", type=float, default=1.0)
    p.add_argument("--id-scale", type=float, default=1.0)
    p.add_argument("--pose-scale", type=float, default=1.0)

    p = sub.add_parser("fit-basis", help="fit normalization template and PCA basis")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--train-fraction", type=float, default=None,
                   help="fit on the identity-disjoint train split only")

    p = sub.add_parser("train-disentangler", help="train the expression regressor")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--pipeline", type=Path, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--train-fraction", type=float, default=0.8)

    p = sub.add_parser("train-gan", help="train generator and discriminator")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--targets", type=int, default=None, help="target frames K")
    p.add_argument("--resume", type=Path, default=None)

    p = sub.add_parser("reenact", help="drive target identity with a driver clip")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--driver-clip", required=True)
    p.add_argument("--target-clip", required=True)
    p.add_argument("--targets", type=int, default=4, help="target frames K")
    p.add_argument("--gan-checkpoint", type=Path, default=None,
                   help="trained weights; a fresh seeded generator if omitted")
    p.add_argument("--landmark-transformer", action="store_true",
                   help="apply identity/expression transfer to driver landmarks")
    p.add_argument("--disentangler", type=Path, default=None)
    p.add_argument("--pipeline", type=Path, default=None)
    p.add_argument("--lambda-exp", type=float, default=1.5)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--max-channels", type=int, default=128)

    p = sub.add_parser("eval", help="score generated frames against a reference clip")
    _common(p)
    p.add_argument("--generated", type=Path, required=True,
                   help="a reenact output directory")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--clip", required=True, help="reference clip name")

    p = sub.add_parser("export-attention", help="dump one query's attention map")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--targets", type=int, default=4)
    p.add_argument("--query", type=int, nargs=2, default=[0, 0], metavar=("I", "J"))
    p.add_argument("--gan-checkpoint", type=Path, default=None)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--max-channels", type=int, default=128)

    p = sub.add_parser("inspect-checkpoint", help="list checkpoint records")
    _common(p, out_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    return ap


def _train_config(args, **overrides) -> TrainConfig:
    values = parse_config_file(args.config) if args.config else {}
    values["seed"] = args.seed
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def _cmd_synth(args) -> int:
    corpus = generate_corpus(args.identities, args.clips_per_id, args.frames,
                             seed=args.seed, image_size=args.image_size,
                             exp_scale=args.exp_scale, id_scale=args.id_scale,
                             pose_scale=args.pose_scale)
    save_corpus(corpus, args.out)
    print(f"wrote {corpus.frames()} frames across {len(corpus.clips)} clips to {args.out}")
    return 0


def _cmd_fit_basis(args) -> int:
    corpus = load_corpus(args.corpus)
    if args.train_fraction is not None:
        corpus, _ = corpus_split(corpus, args.train_fraction, args.seed)
    pipe = fit_landmark_pipeline(corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "pipeline.ckpt"
    save_pipeline(path, pipe)
    print(f"wrote {path} ({pipe.basis.n_components} expression components)")
    return 0


def _cmd_train_disentangler(args) -> int:
    corpus = load_corpus(args.corpus)
    pipe = load_pipeline(args.pipeline)
    train, heldout = corpus_split(corpus, args.train_fraction, args.seed)
    config = _train_config(args, steps=args.steps,
                           image_size=corpus.image_size)
    result = train_disentangler(train, heldout, pipe, config,
                                batch_size=args.batch_size)
    args.out.mkdir(parents=True, exist_ok=True)
    save_disentangler(args.out / "disentangler.ckpt", result.model)
    with open(args.out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "mse"])
        for i, v in enumerate(result.loss_curve):
            w.writerow([i, f"{v:.10g}"])
    report = {"heldout_mse": result.heldout_mse,
              "baseline_mse": result.baseline_mse,
              "alpha_correlation": result.alpha_correlation}
    (args.out / "report.json").write_text(json.dumps(report, indent=1))
    print(f"held-out MSE {result.heldout_mse:.4f} "
          f"(zero-predictor baseline {result.baseline_mse:.4f})")
    return 0


def _cmd_train_gan(args) -> int:
    corpus = load_corpus(args.corpus)
    config = _train_config(args, steps=args.steps, n_targets=args.targets,
                           image_size=corpus.image_size)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train_gan(corpus, config, out_dir=args.out,
                       resume=args.resume, log_file=args.out / "metrics.csv")
    print(f"trained {config.steps} steps; probe L1 {result.l1_start:.4f} -> "
          f"{result.l1_end:.4f}; checkpoint {result.checkpoint_path}")
    return 0


def _find_clip(corpus, name):
    for clip in corpus.clips:
        if clip.name == name:
            return clip
    raise LookupError(f"clip {name!r} not found in corpus")


def _load_generator(args, image_size: int):
    if args.gan_checkpoint is not None:
        config = TrainConfig(seed=args.seed, image_size=image_size)
        _, gen, _, _, _ = load_gan_checkpoint(args.gan_checkpoint, config)
        if gen.cfg.image_size != image_size:
            raise ValueError(f"checkpoint trained at {gen.cfg.image_size}px, "
                             f"corpus is {image_size}px")
        return gen
    cfg = GeneratorConfig(image_size=image_size, base_channels=args.base_channels,
                          max_channels=args.max_channels, n_targets=args.targets)
    return Generator(cfg, seed=args.seed)


def _target_landmark_image(clip, indices, size):
    ys = np.stack([clip.images[i].astype(np.float64) / 127.5 - 1.0 for i in indices])
    rys = np.stack([rasterize(clip.landmarks[i], size, size) * 2.0 - 1.0
                    for i in indices])
    return Tensor(ys[None]), Tensor(rys[None])


def _cmd_reenact(args) -> int:
    corpus = load_corpus(args.corpus)
    driver = _find_clip(corpus, args.driver_clip)
    target = _find_clip(corpus, args.target_clip)
    if target.landmarks.shape[0] < args.targets:
        raise ValueError(f"target clip has {target.landmarks.shape[0]} frames, "
                         f"need {args.targets}")
    size = corpus.image_size
    gen = _load_generator(args, size)
    gen.cfg.n_targets = args.targets

    transformer = None
    if args.landmark_transformer:
        if args.disentangler is None or args.pipeline is None:
            raise ValueError("--landmark-transformer needs --disentangler and --pipeline")
        pipe = load_pipeline(args.pipeline)
        model = load_disentangler(args.disentangler, seed=args.seed)
        tgt_ids = []
        for i in range(args.targets):
            l_bar, _ = normalize_landmark(target.landmarks[i], pipe.template)
            l_id, _, _ = estimate_landmark_parts(model, target.images[i], l_bar,
                                                 pipe.basis, args.lambda_exp)
            tgt_ids.append(l_id)
        target_identity = np.mean(tgt_ids, axis=0)
        transformer = (pipe, model, target_identity)

    tgt_idx = list(range(args.targets))
    y, ry = _target_landmark_image(target, tgt_idx, size)
    out_images = args.out / "images"
    out_images.mkdir(parents=True, exist_ok=True)
    records = []
    for t in range(driver.landmarks.shape[0]):
        lm = driver.landmarks[t]
        if transformer is not None:
            pipe, model, target_identity = transformer
            l_bar, sim = normalize_landmark(lm, pipe.template)
            _, l_exp, _ = estimate_landmark_parts(model, driver.images[t], l_bar,
                                                  pipe.basis, args.lambda_exp)
            lm = denormalize(pipe.basis.mean_landmark + target_identity + l_exp, sim)
        x = Tensor(rasterize(lm, size, size)[None] * 2.0 - 1.0)
        frame = gen(x, y, ry).data[0]
        write_ppm(out_images / f"frame{t:04d}.ppm", (frame + 1.0) / 2.0)
        records.append(("output", t, lm))
    save_landmark_jsonl(args.out / "landmarks.jsonl", records)
    meta = {"driver_clip": args.driver_clip, "target_clip": args.target_clip,
            "targets": args.targets, "seed": args.seed,
            "landmark_transformer": bool(args.landmark_transformer),
            "lambda_exp": args.lambda_exp, "frames": len(records)}
    (args.out / "meta.json").write_text(json.dumps(meta, indent=1))
    print(f"wrote {len(records)} frames to {out_images}")
    return 0


def _cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    ref = _find_clip(corpus, args.clip)
    gen_dir = Path(args.generated)
    frames = sorted((gen_dir / "images").glob("frame*.ppm"))
    if not frames:
        raise FileNotFoundError(f"no frames under {gen_dir / 'images'}")
    if len(frames) != ref.landmarks.shape[0]:
        raise ValueError(f"{len(frames)} generated frames vs "
                         f"{ref.landmarks.shape[0]} reference frames")
    gen_lms = np.stack([pts for _, _, pts in
                        load_landmark_jsonl(gen_dir / "landmarks.jsonl")])
    size = corpus.image_size
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for t, path in enumerate(frames):
        a = np.moveaxis(read_ppm(path), 0, -1)
        b = np.moveaxis(ref.images[t].astype(np.float64) / 255.0, 0, -1)
        mask = face_mask(ref.landmarks[t], size, size)
        rows.append([t, ssim(a, b), psnr(a, b),
                     masked_ssim(a, b, mask), masked_psnr(a, b, mask)])
    pose_err = prmse_landmarks(gen_lms, ref.landmarks, corpus.template)
    report = args.out / "report.csv"
    with open(report, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "ssim", "psnr", "m_ssim", "m_psnr", "prmse"])
        for row in rows:
            w.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]] + [""])
        means = [float(np.mean([r[i] for r in rows])) for i in range(1, 5)]
        w.writerow(["aggregate"] + [f"{v:.10g}" for v in means]
                   + [f"{pose_err:.10g}"])
    print(f"wrote {report}: SSIM {means[0]:.4f} PSNR {means[1]:.2f} dB "
          f"PRMSE {pose_err:.3f} deg")
    return 0


def _cmd_export_attention(args) -> int:
    corpus = load_corpus(args.corpus)
    clip = _find_clip(corpus, args.clip)
    if not (0 <= args.frame < clip.landmarks.shape[0]):
        raise ValueError(f"frame {args.frame} outside clip of "
                         f"{clip.landmarks.shape[0]} frames")
    size = corpus.image_size
    gen = _load_generator(args, size)
    y, ry = _target_landmark_image(clip, list(range(args.targets)), size)
    x = Tensor(rasterize(clip.landmarks[args.frame], size, size)[None] * 2.0 - 1.0)
    z_y_all, _ = gen.encode_targets(y, ry)
    z_x = gen.driver_encoder(x)
    amap = export_attention_map(z_x, z_y_all, gen.blender.blocks[0].params(),
                                tuple(args.query))
    args.out.mkdir(parents=True, exist_ok=True)
    for k in range(amap.shape[0]):
        write_pgm(args.out / f"attention_target{k}.pgm", amap[k])
    print(f"wrote {amap.shape[0]} attention maps "
          f"({amap.shape[1]}x{amap.shape[2]}) to {args.out}")
    return 0


def _cmd_inspect_checkpoint(args) -> int:
    records, version = load_checkpoint(args.checkpoint)
    total = sum(int(np.asarray(a).size) for a in records.values())
    print(f"{args.checkpoint}: version {version}, {len(records)} records, "
          f"{total} values")
    for name, arr in records.items():
        print(f"  {name}  {tuple(np.asarray(arr).shape)}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "fit-basis": _cmd_fit_basis,
    "train-disentangler": _cmd_train_disentangler,
    "train-gan": _cmd_train_gan,
    "reenact": _cmd_reenact,
    "eval": _cmd_eval,
    "export-attention": _cmd_export_attention,
    "inspect-checkpoint": _cmd_inspect_checkpoint,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, LookupError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
