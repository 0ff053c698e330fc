"""Command-line entry points: synthesize, train, infer, evaluate.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
The environment variable CFMD_SEED overrides the config seed for training.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import build_dataset, gamma_response, load_clip, load_image, save_image
from .errors import CheckpointError, InvalidInputError
from .evaluation import BUILTIN_METRICS, evaluate_dataset, write_report
from .training import parse_config_file, train_loop

log = logging.getLogger("facedeblur")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _parse_int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidInputError(f"expected comma-separated integers, got {text!r}")


def _parse_float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidInputError(f"expected comma-separated numbers, got {text!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synthesize(args):
    clips_dir = Path(args.clips)
    eyes_dir = Path(args.eyes)
    if not clips_dir.is_dir():
        raise InvalidInputError(f"--clips directory not found: {clips_dir}")
    if not eyes_dir.is_dir():
        raise InvalidInputError(f"--eyes directory not found: {eyes_dir}")
    n_frames = _parse_int_list(args.n_frames)
    if not n_frames:
        raise InvalidInputError("--n-frames must name at least one window length")
    for n in n_frames:
        if not (5 <= n <= 13):
            raise InvalidInputError(f"--n-frames value {n} outside supported range [5, 13]")

    clips = []
    for clip_dir in sorted(p for p in clips_dir.iterdir() if p.is_dir()):
        sidecar = eyes_dir / f"{clip_dir.name}.eyes.csv"
        if not sidecar.exists():
            log.warning("no eye sidecar for clip %s; skipped", clip_dir.name)
            continue
        clips.append(load_clip(clip_dir, sidecar))
    if not clips:
        raise InvalidInputError(f"no usable clips under {clips_dir}")

    response = gamma_response if args.gamma else None
    manifest = build_dataset(clips, n_frames, args.out, response=response)
    for n, count in manifest.counts_by_n().items():
        print(f"n_frames={n}: {count} records")
    print(f"total records: {len(manifest.records)}")
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args):
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise InvalidInputError(f"--manifest file not found: {manifest}")
    cfg, weights = parse_config_file(args.config)
    env_seed = os.environ.get("CFMD_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
        log.info("seed overridden by CFMD_SEED=%s", env_seed)
    final = train_loop(manifest, cfg, weights, args.out, resume=args.resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_infer(args):
    ckpt_path = Path(args.ckpt)
    blur_path = Path(args.blur)
    if not ckpt_path.is_file():
        raise InvalidInputError(f"--ckpt file not found: {ckpt_path}")
    if not blur_path.is_file():
        raise InvalidInputError(f"--blur file not found: {blur_path}")
    if args.u is not None:
        factors = _parse_float_list(args.u)
    else:
        m = args.num_frames
        if m < 1:
            raise InvalidInputError("--num-frames must be >= 1")
        factors = [k / m for k in range(m)]
    for u in factors:
        if not 0.0 <= u <= 1.0:
            raise InvalidInputError(f"control factor {u} outside [0, 1]")

    from .checkpoint import load_generator
    gen = load_generator(ckpt_path)
    blur = load_image(blur_path)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, u in enumerate(factors):
        restored = gen.restore(blur, u)
        save_image(out_dir / f"frame_{i:03d}.png", restored)
        frames.append(restored)
    print(f"wrote {len(frames)} frames to {out_dir}")

    if args.gif:
        images = [Image.fromarray(np.round(f * 255.0).astype(np.uint8)) for f in frames]
        preview = out_dir / "preview.apng"
        # animated PNG keeps the preview lossless
        images[0].save(preview, format="PNG", save_all=True, append_images=images[1:],
                       duration=int(round(1000 / args.fps)), loop=0)
        print(f"wrote preview: {preview}")
    return EXIT_OK


def cmd_evaluate(args):
    manifest = Path(args.manifest)
    ckpt_path = Path(args.ckpt)
    if not manifest.is_file():
        raise InvalidInputError(f"--manifest file not found: {manifest}")
    if not ckpt_path.is_file():
        raise InvalidInputError(f"--ckpt file not found: {ckpt_path}")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in BUILTIN_METRICS:
            raise InvalidInputError(f"unknown metric {m!r}; available: {', '.join(BUILTIN_METRICS)}")
    report = evaluate_dataset(manifest, ckpt_path, metrics=metrics)
    jsonl_path, text_path = write_report(report, args.out)
    print(Path(text_path).read_text(encoding="utf-8"), end="")
    print(f"report: {jsonl_path} / {text_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="facedeblur",
        description="Synthesize blurred face datasets, train the restoration "
                    "model, and restore sharp moments at chosen control factors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="build a blur/ground-truth dataset from sharp clips")
    p.add_argument("--clips", required=True, help="directory with one subdirectory of frames per clip")
    p.add_argument("--eyes", required=True, help="directory with <clip_id>.eyes.csv sidecars")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-frames", default="5,7,9,11,13", help="comma-separated window lengths (5-13)")
    p.add_argument("--gamma", action="store_true", help="apply a gamma camera response to the averaged frames")
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("train", help="train the restoration model on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help="flat key = value experiment config")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--resume", default=None, help="trainer checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="restore sharp moments from one blurred image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--blur", required=True)
    p.add_argument("--num-frames", type=int, default=None,
                   help="restore M frames at u = 0/M .. (M-1)/M")
    p.add_argument("--u", default=None, help="explicit comma-separated control factors")
    p.add_argument("--out", required=True)
    p.add_argument("--gif", action="store_true", help="also write an animated preview")
    p.add_argument("--fps", type=float, default=5.0, help="preview frame rate")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report path (text table written alongside)")
    p.add_argument("--metrics", default="psnr,ssim")
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "infer" and (args.num_frames is None) == (args.u is None):
        parser.error("infer requires exactly one of --num-frames or --u")
    try:
        return args.fn(args)
    except (InvalidInputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures
        log.error("%s", exc, exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
