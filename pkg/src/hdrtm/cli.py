"""Command-line entry points: synth, train, tonemap, eval.

Exit codes are a stable contract: 0 success, 1 runtime/IO failure,
2 validation failure, 3 checkpoint incompatibility. Every command prints
its fully resolved configuration before doing work and writes the same
JSON next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shlex
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import (BatchTooSmall, BetaTooSmall, CheckpointMismatch,
                     ConfigError, EmptyDataset, EmptyPool, HdrtmError,
                     SourceTooSmall)
from .imaging import Clip, load_clip, load_ldr, load_radiance, write_clip, write_ldr
from .model import GeneratorConfig

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3

HDR_EXTS = (".exr", ".hdr")
LDR_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


# ------------------------------------------------------------- config files


def _load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:                  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text.decode())
    raise ConfigError(f"config must be .toml or .json, got {path.name}")


def _echo_config(cfg: dict, out_dir=None) -> None:
    line = json.dumps(cfg, indent=1, default=str)
    print(line)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective_config.json").write_text(line)


def _reject_unknown(given: dict, allowed, where: str) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    lo, hi = args.gamma_min, args.gamma_max
    if args.gamma is not None:
        lo = hi = args.gamma
    if not (1.0 <= lo <= hi <= 2.8):
        raise ConfigError(f"gamma range [{lo}, {hi}] outside [1, 2.8]")
    src = Path(args.src)
    if not src.is_dir():
        raise ConfigError(f"source directory {src} does not exist")
    exts = HDR_EXTS if args.kind == "hdr" else LDR_EXTS
    images = sorted(p for p in src.iterdir() if p.suffix.lower() in exts)
    if not images:
        raise EmptyPool(f"no {args.kind} images under {src}")
    out = Path(args.out)
    _echo_config({"command": "synth", "src": str(src), "out": str(out),
                  "kind": args.kind, "frames": args.frames, "crop": args.crop,
                  "gamma": [lo, hi], "clips_per_image": args.count,
                  "seed": args.seed}, out)

    written = 0
    for i, path in enumerate(images):
        img = load_radiance(path) if args.kind == "hdr" else load_ldr(path)
        for j in range(args.count):
            ss = np.random.SeedSequence(args.seed, spawn_key=(i, j))
            rng = np.random.Generator(np.random.PCG64(ss))
            gamma = float(rng.uniform(lo, hi)) if hi > lo else lo
            spec = data_mod.SyntheticClipSpec(
                gamma=gamma, frames=args.frames, crop=args.crop,
                seed=int(ss.generate_state(1)[0]))
            clip = data_mod.synth_clip_from_image(img, spec)
            name = path.stem if args.count == 1 else f"{path.stem}_{j}"
            write_clip(clip, out / name)
            written += 1
    manifest = data_mod.build_manifest({args.kind: out}, seed=args.seed)
    manifest.save(out / "manifest.json")
    print(f"wrote {written} clips x {args.frames} frames under {out}")
    return EXIT_OK


# ------------------------------------------------------------------ train


_TRAIN_KEYS = ("roots", "out_dir", "mode", "epochs", "batch", "negatives",
               "clip_len", "crop", "seed", "generator", "discriminator",
               "schedule", "grad_clip", "valid_every", "max_steps", "dtype",
               "device", "memory_budget_mb", "resume", "gamma_range",
               "lr_g", "lr_d", "halving_period", "weights")


def _build_train_config(args):
    from .losses import LossWeights
    from .model import DiscriminatorConfig
    from .training import (StageSchedule, TrainConfig, fixed_schedule,
                           staged_schedule)

    file_cfg = _load_config_file(args.config) if args.config else {}
    _reject_unknown(file_cfg, _TRAIN_KEYS, "config")

    roots = dict(file_cfg.get("roots", {}))
    for kind, flag in (("hdr", args.hdr), ("ldr_good", args.ldr_good),
                       ("ldr_poor", args.ldr_poor)):
        if flag is not None:
            roots[kind] = flag
    _reject_unknown(roots, data_mod.KINDS, "roots")
    for kind in data_mod.KINDS:
        if kind not in roots:
            raise ConfigError(f"no directory given for the {kind} pool")
        if not Path(roots[kind]).is_dir():
            raise ConfigError(f"{kind} pool directory {roots[kind]} does not exist")

    def pick(flag, key, default):
        if flag is not None:
            return flag
        return file_cfg.get(key, default)

    gen_dict = dict(file_cfg.get("generator", {}))
    try:
        generator = GeneratorConfig(**gen_dict)
    except TypeError as exc:
        raise ConfigError(f"generator config: {exc}") from exc
    disc_dict = file_cfg.get("discriminator")
    try:
        discriminator = DiscriminatorConfig(**disc_dict) if disc_dict else None
    except TypeError as exc:
        raise ConfigError(f"discriminator config: {exc}") from exc

    lr_g = pick(args.lr_g, "lr_g", None)
    lr_d = pick(args.lr_d, "lr_d", None)
    halving = file_cfg.get("halving_period", None)
    sched_cfg = file_cfg.get("schedule")
    sched_name = args.schedule or (sched_cfg if isinstance(sched_cfg, str) else None)
    lr_kwargs = {k: v for k, v in (("lr_g", lr_g), ("lr_d", lr_d),
                                   ("halving_period", halving)) if v is not None}
    if isinstance(sched_cfg, dict):
        schedule = StageSchedule.from_dict(sched_cfg)
    elif sched_name == "fixed":
        weights = LossWeights(**file_cfg.get("weights", {}))
        schedule = fixed_schedule(weights, **lr_kwargs)
    else:
        schedule = staged_schedule(**lr_kwargs)

    out_dir = args.out or file_cfg.get("out_dir")
    if out_dir is None:
        raise ConfigError("no output directory (--out)")
    try:
        return TrainConfig(
            roots=roots, out_dir=str(out_dir),
            mode=pick(args.mode, "mode", "video"),
            epochs=pick(args.epochs, "epochs", 20),
            batch=pick(args.batch, "batch", 8),
            negatives=pick(args.negatives, "negatives", 16),
            clip_len=pick(args.clip_len, "clip_len", 3),
            crop=pick(args.crop, "crop", 256),
            seed=pick(args.seed, "seed", 0),
            generator=generator, discriminator=discriminator,
            schedule=schedule,
            grad_clip=file_cfg.get("grad_clip", 5.0),
            valid_every=pick(args.valid_every, "valid_every", 200),
            max_steps=pick(args.max_steps, "max_steps", None),
            dtype=pick(args.dtype, "dtype", "float32"),
            device=file_cfg.get("device", "cpu"),
            memory_budget_mb=file_cfg.get("memory_budget_mb"),
            resume=args.resume or file_cfg.get("resume"),
            gamma_range=tuple(file_cfg.get("gamma_range", data_mod.GAMMA_RANGE)),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    from .training import train
    cfg = _build_train_config(args)
    _echo_config(cfg.to_dict(), cfg.out_dir)
    summary = train(cfg)
    print(json.dumps(summary, indent=1))
    if summary["last_report"] is None and summary["skipped"] > 0:
        print("all steps aborted on non-finite losses", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


# ---------------------------------------------------------------- tonemap


def cmd_tonemap(args) -> int:
    from .inference import TonemapPipeline
    inp = Path(args.input)
    if not inp.exists():
        raise ConfigError(f"input {inp} does not exist")
    mode = args.mode or ("video" if inp.is_dir() else "image")
    if mode == "image" and inp.is_dir():
        raise ConfigError("image mode needs a single input file")
    if mode == "video" and not inp.is_dir():
        raise ConfigError("video mode needs a frame directory")
    out = Path(args.out)
    pipe = TonemapPipeline.from_checkpoint(args.checkpoint, nu=args.nu)
    echo_dir = out if mode == "video" or out.suffix == "" else out.parent
    _echo_config({"command": "tonemap", "input": str(inp), "mode": mode,
                  "checkpoint": str(args.checkpoint), "nu": args.nu,
                  "out": str(out), "mux": args.mux}, echo_dir)

    if mode == "image":
        result = pipe.map_image(load_radiance(inp))
        target = out / f"{inp.stem}.png" if out.suffix == "" else out
        target.parent.mkdir(parents=True, exist_ok=True)
        write_ldr(result, target)
        print(f"wrote {target}")
        return EXIT_OK

    clip = load_clip(inp)
    try:
        pipe.gen.set_tfr(True)
    except BetaTooSmall:
        pass                                 # too few channels: run frame-wise
    outs = pipe.map_clip(clip.frames)
    written = write_clip(Clip(outs, fps=clip.fps), out)
    print(f"wrote {len(written)} frames under {out}")
    if args.mux:
        tokens = [t.format(frames=out, out=out.with_suffix(".mp4"))
                  for t in shlex.split(args.mux)]
        proc = subprocess.run(tokens)
        if proc.returncode != 0:
            print(f"mux command failed with {proc.returncode}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


# ------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from .metrics import evaluate_testset
    out = Path(args.out) if args.out else None
    _echo_config({"command": "eval", "hdr_dir": str(args.hdr_dir),
                  "checkpoint": str(args.checkpoint),
                  "frames_per_video": args.frames_per_video,
                  "out": str(out) if out else None}, out)
    report = evaluate_testset(args.hdr_dir, args.checkpoint,
                              frames_per_video=args.frames_per_video,
                              out_dir=out)
    print(json.dumps(report["mean"], indent=1))
    print(f"evaluated {len(report['videos'])} videos")
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML/JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--mode", choices=("image", "video"), default=None)

    parser = argparse.ArgumentParser(
        prog="hdrtm", description="Unsupervised HDR to LDR tone mapping")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="synthesize clips from stills by dynamic cropping")
    p.add_argument("src", help="directory of source images")
    p.add_argument("--kind", choices=data_mod.KINDS, default="hdr")
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--crop", type=int, default=256)
    p.add_argument("--gamma", type=float, default=None,
                   help="fixed zoom factor; overrides the range")
    p.add_argument("--gamma-min", type=float, default=data_mod.GAMMA_RANGE[0])
    p.add_argument("--gamma-max", type=float, default=data_mod.GAMMA_RANGE[1])
    p.add_argument("--count", type=int, default=1, help="clips per image")
    p.set_defaults(handler=cmd_synth, seed=0)

    p = sub.add_parser("train", parents=[common], help="run the training loop")
    p.add_argument("--hdr", help="HDR pool directory")
    p.add_argument("--ldr-good", help="good-LDR pool directory")
    p.add_argument("--ldr-poor", help="poor-LDR pool directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--clip-len", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--schedule", choices=("staged", "fixed"), default=None)
    p.add_argument("--lr-g", type=float, default=None)
    p.add_argument("--lr-d", type=float, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--valid-every", type=int, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("tonemap", parents=[common],
                       help="tone map an HDR image or frame directory")
    p.add_argument("input", help="HDR image file or frame directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nu", type=float, default=0.5,
                   help="color reproduction saturation exponent")
    p.add_argument("--mux", help="external command run as: cmd {frames} {out}")
    p.set_defaults(handler=cmd_tonemap)

    p = sub.add_parser("eval", parents=[common],
                       help="TMQI/RWE report over a directory of HDR clips")
    p.add_argument("hdr_dir", help="directory of HDR clip directories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames-per-video", type=int, default=6)
    p.set_defaults(handler=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out", None) is None and args.command in ("synth", "tonemap"):
        print("error: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.handler(args)
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, EmptyPool, EmptyDataset, SourceTooSmall,
            BatchTooSmall, BetaTooSmall, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HdrtmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
