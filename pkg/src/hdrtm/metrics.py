"""Quality and temporal-consistency evaluation over tone-mapped outputs.

Exposes the tone-mapped quality index, the relative warping error over
clips, and the test-set protocol that scores the first frames of every
clip in a directory and emits JSON/CSV reports.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, TooFewFrames
from .flow import LucasKanadeFlow, warp
from .imaging import (
    Clip,
    LuminanceMap,
    extract_luminance,
    load_clip,
    normalize_hdr_clip,
)
from .tmqi import TmqiResult, tmqi, tmqi_q  # noqa: F401  (metric lives here API-wise)

RWE_EPS = 1e-6
REPORT_FORMAT_VERSION = 1
_CSV_COLUMNS = ("video", "frames", "tmqi", "tmqi_s", "tmqi_n", "rwe", "btmqi")


def _clip_stack(clip) -> np.ndarray:
    if isinstance(clip, Clip):
        frames = clip.frames
    elif isinstance(clip, np.ndarray):
        if clip.ndim != 3:
            raise ValueError(f"expected T x H x W clip, got {clip.shape}")
        return clip.astype(np.float64)
    else:
        frames = list(clip)
    return np.stack([
        f.values if isinstance(f, LuminanceMap) else np.asarray(f, np.float64)
        for f in frames]).astype(np.float64)


def rwe(clip, flow_estimator=None, eps: float = RWE_EPS) -> float:
    """Relative warping error of a luminance clip.

    For each consecutive pair the next frame is aligned onto the previous
    one with the estimated flow; the error is twice the mean of
    |prev - aligned| / (prev + aligned + eps), averaged over pairs.
    """
    frames = _clip_stack(clip)
    if frames.shape[0] < 2:
        raise TooFewFrames(f"need >= 2 frames, got {frames.shape[0]}")
    est = flow_estimator if flow_estimator is not None else LucasKanadeFlow()
    errors = []
    for t in range(1, frames.shape[0]):
        prev, cur = frames[t - 1], frames[t]
        flow = est(prev, cur)
        aligned = warp(cur, flow)
        errors.append(2.0 * float(np.mean(np.abs(prev - aligned)
                                          / (prev + aligned + eps))))
    return float(np.mean(errors))


# ---------------------------------------------------------- test protocol


def _find_clip_dirs(hdr_dir: Path) -> list[Path]:
    exts = {".hdr", ".exr"}
    subdirs = sorted(p for p in hdr_dir.iterdir() if p.is_dir()
                     and any(q.suffix.lower() in exts for q in p.iterdir()))
    if subdirs:
        return subdirs
    if any(q.suffix.lower() in exts for q in hdr_dir.iterdir()):
        return [hdr_dir]
    raise EmptyDataset(f"no HDR clips found under {hdr_dir}")


def _model_fn(model):
    if callable(model):
        return model
    from .inference import TonemapPipeline
    return TonemapPipeline.from_checkpoint(model).map_luminance


def evaluate_testset(hdr_dir, model, frames_per_video: int = 6,
                     flow_estimator=None, out_dir=None) -> dict:
    """Score every clip directory under hdr_dir at original resolution.

    model is a checkpoint path or a callable mapping a T x H x W stack of
    normalized luminance to tone-mapped luminance of the same shape. Per
    clip only the first frames_per_video frames enter the means. The
    btmqi column is reserved for an external blind metric and left empty.
    """
    hdr_dir = Path(hdr_dir)
    if not hdr_dir.is_dir():
        raise EmptyDataset(f"{hdr_dir} is not a directory")
    clip_dirs = _find_clip_dirs(hdr_dir)
    fn = _model_fn(model)
    rows = []
    for clip_dir in clip_dirs:
        clip = load_clip(clip_dir)
        frames = clip.frames[:frames_per_video]
        raw = [extract_luminance(f) for f in frames]
        norm = normalize_hdr_clip(raw)
        stack = np.stack([m.values for m in norm]).astype(np.float64)
        outputs = np.asarray(fn(stack), np.float64)
        if outputs.shape != stack.shape:
            raise ValueError(
                f"model returned {outputs.shape}, expected {stack.shape}")
        scores = [tmqi(raw[t], np.clip(outputs[t], 0.0, 1.0))
                  for t in range(len(frames))]
        row = {
            "video": clip_dir.name,
            "frames": len(frames),
            "tmqi": float(np.mean([s.Q for s in scores])),
            "tmqi_s": float(np.mean([s.S for s in scores])),
            "tmqi_n": float(np.mean([s.N for s in scores])),
            "rwe": (rwe(outputs, flow_estimator=flow_estimator)
                    if len(frames) >= 2 else 0.0),
            "btmqi": None,
        }
        rows.append(row)
    mean = {key: float(np.mean([r[key] for r in rows]))
            for key in ("frames", "tmqi", "tmqi_s", "tmqi_n", "rwe")}
    mean["btmqi"] = None
    report = {
        "format_version": REPORT_FORMAT_VERSION,
        "frames_per_video": frames_per_video,
        "videos": rows,
        "mean": mean,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report_json(report, out_dir / "report.json")
        write_report_csv(report, out_dir / "report.csv")
    return report


def write_report_json(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1))


def write_report_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for row in report["videos"]:
            writer.writerow([row["video"], row["frames"], row["tmqi"],
                             row["tmqi_s"], row["tmqi_n"], row["rwe"],
                             "" if row["btmqi"] is None else row["btmqi"]])
        mean = report["mean"]
        writer.writerow(["mean", mean["frames"], mean["tmqi"], mean["tmqi_s"],
                         mean["tmqi_n"], mean["rwe"],
                         "" if mean["btmqi"] is None else mean["btmqi"]])
