"""HDR/LDR image and clip I/O, luminance handling, and color reproduction.

All pixel data is float32 RGB in linear light for HDR and [0,1] for LDR.
Luminance follows the BT.601 weights unless a caller overrides them.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from . import exr
from .errors import (
    AllZeroImage,
    CorruptFile,
    DegenerateRangeWarning,
    NegativePixelWarning,
    ShapeMismatch,
    TooSmall,
    UnsupportedFormat,
)

REC601_WEIGHTS = (0.299, 0.587, 0.114)
COLOR_EPS = 1e-8

_HDR_EXTS = {".hdr", ".exr"}
_LDR_EXTS = {".png", ".jpg", ".jpeg"}


# ------------------------------------------------------------ domain types


@dataclass
class RadianceImage:
    """Linear radiance RGB image, nonnegative and unbounded above."""

    pixels: np.ndarray
    source: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("radiance values must be finite")
        if self.pixels.min() < 0:
            raise ValueError("radiance values must be nonnegative")
        if self.pixels.max() <= 0:
            raise AllZeroImage("radiance image has no positive pixel")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class LuminanceMap:
    """Single-channel luminance; ``normalized`` marks network-input range."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"expected H x W values, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("luminance values must be finite")
        if self.normalized:
            if self.values.min() < 0 or self.values.max() > 1:
                raise ValueError("normalized luminance must lie in [0, 1]")
        elif self.values.min() < 0:
            raise ValueError("raw luminance must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class LdrImage:
    """Display-referred RGB image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("LDR values must be finite")
        if self.pixels.min() < -1e-6 or self.pixels.max() > 1 + 1e-6:
            raise ValueError("LDR values must lie in [0, 1]")
        self.pixels = np.clip(self.pixels, 0.0, 1.0)


@dataclass
class Clip:
    """Ordered frame sequence of one homogeneous frame kind."""

    frames: list
    fps: float | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a clip needs at least one frame")
        kinds = {type(f) for f in self.frames}
        if len(kinds) > 1:
            raise ValueError(f"mixed frame kinds in clip: {kinds}")
        shapes = {_frame_shape(f) for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames disagree on resolution: {shapes}")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def kind(self) -> type:
        return type(self.frames[0])


def _frame_shape(frame) -> tuple[int, int]:
    if isinstance(frame, (RadianceImage, LdrImage)):
        return frame.pixels.shape[:2]
    if isinstance(frame, LuminanceMap):
        return frame.values.shape
    arr = np.asarray(frame)
    return arr.shape[:2]


# ------------------------------------------------------------------- I/O


def load_radiance(path) -> RadianceImage:
    """Load a linear radiance image from a Radiance .hdr or OpenEXR file.

    Negative values are clamped to zero with a warning counting them.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ext = path.suffix.lower()
    if ext == ".exr":
        rgb = exr.read_exr(path)
    elif ext == ".hdr":
        bgr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if bgr is None or bgr.ndim != 3:
            raise CorruptFile(f"cannot decode {path}")
        rgb = bgr[:, :, ::-1].astype(np.float32)
    else:
        raise UnsupportedFormat(f"unsupported radiance format {ext!r}")
    if not np.isfinite(rgb).all():
        raise CorruptFile(f"{path} contains non-finite radiance values")
    negatives = int((rgb < 0).sum())
    if negatives:
        warnings.warn(f"{negatives} negative pixels clamped to 0 in {path}",
                      NegativePixelWarning)
        rgb = np.maximum(rgb, 0.0)
    if rgb.max() <= 0:
        raise AllZeroImage(f"{path} has no positive pixel")
    return RadianceImage(rgb, source=str(path))


def save_radiance(img, path) -> None:
    """Write radiance to .exr (half floats) or .hdr."""
    rgb = img.pixels if isinstance(img, RadianceImage) else np.asarray(img, np.float32)
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".exr":
        exr.write_exr(path, rgb)
    elif ext == ".hdr":
        if not cv2.imwrite(str(path), rgb[:, :, ::-1]):
            raise OSError(f"failed to write {path}")
    else:
        raise UnsupportedFormat(f"unsupported radiance format {ext!r}")


def write_ldr(img, path) -> None:
    """Write an LdrImage as 8-bit PNG; quantization is round-half-up."""
    pixels = img.pixels if isinstance(img, LdrImage) else np.asarray(img, np.float32)
    data = np.floor(pixels * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    if not cv2.imwrite(str(path), data[:, :, ::-1]):
        raise OSError(f"failed to write {path}")


def load_ldr(path) -> LdrImage:
    path = Path(path)
    if path.suffix.lower() not in _LDR_EXTS:
        raise UnsupportedFormat(f"unsupported LDR format {path.suffix!r}")
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise CorruptFile(f"cannot decode {path}")
    return LdrImage(bgr[:, :, ::-1].astype(np.float32) / 255.0)


def load_clip(directory, fps: float | None = None) -> Clip:
    """Load a frame-directory clip; frame kind follows the file extension.

    An optional ``clip.json`` manifest ``{"frames": [...], "fps": ...}``
    pins ordering and frame rate; otherwise frames are the lexicographically
    sorted image files in the directory.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    manifest = directory / "clip.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        names = meta["frames"]
        fps = meta.get("fps", fps)
        paths = [directory / n for n in names]
    else:
        paths = sorted(p for p in directory.iterdir()
                       if p.suffix.lower() in _HDR_EXTS | _LDR_EXTS)
    if not paths:
        raise CorruptFile(f"no frames found in {directory}")
    frames = []
    for p in paths:
        if p.suffix.lower() in _HDR_EXTS:
            frames.append(load_radiance(p))
        else:
            frames.append(load_ldr(p))
    return Clip(frames, fps=fps)


def write_clip(clip: Clip, directory, prefix: str = "frame") -> list[Path]:
    """Write a clip as zero-padded frames plus a clip.json manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".exr" if clip.kind is RadianceImage else ".png"
    width = max(4, len(str(len(clip) - 1)))
    paths = []
    for i, frame in enumerate(clip):
        p = directory / f"{prefix}_{i:0{width}d}{ext}"
        if clip.kind is RadianceImage:
            save_radiance(frame, p)
        else:
            write_ldr(frame, p)
        paths.append(p)
    meta = {"frames": [p.name for p in paths]}
    if clip.fps is not None:
        meta["fps"] = clip.fps
    (directory / "clip.json").write_text(json.dumps(meta, indent=1))
    return paths


# ----------------------------------------------------- luminance pipeline


def extract_luminance(img, weights: Sequence[float] = REC601_WEIGHTS) -> LuminanceMap:
    """Weighted RGB-to-luminance projection (BT.601 by default)."""
    pixels = img.pixels if isinstance(img, (RadianceImage, LdrImage)) else np.asarray(img)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 pixels, got {pixels.shape}")
    w = np.asarray(weights, pixels.dtype if pixels.dtype == np.float64 else np.float32)
    return LuminanceMap(pixels @ w, normalized=False)


def _lum_values(y) -> np.ndarray:
    return y.values if isinstance(y, LuminanceMap) else np.asarray(y)


def normalize_hdr(y) -> LuminanceMap:
    """Map raw HDR luminance into [0, 1] via log compression.

    y' = (log(1 + y/mu) - min) / (max - min) with mu the geometric mean of
    the positive values. A constant input returns an all-0.5 map with a
    DegenerateRangeWarning instead of dividing by zero.
    """
    vals = _lum_values(y)
    if isinstance(y, LuminanceMap) and y.normalized:
        raise ValueError("input is already normalized")
    stats = _log_norm_stats([vals])
    return _apply_log_norm(vals, stats)


def normalize_hdr_clip(frames: Sequence) -> list[LuminanceMap]:
    """Normalize a clip of raw luminance frames with shared statistics.

    Sharing mu/min/max across frames keeps the mapping temporally
    consistent, unlike normalizing each frame on its own.
    """
    arrays = [_lum_values(f) for f in frames]
    stats = _log_norm_stats(arrays)
    return [_apply_log_norm(a, stats) for a in arrays]


def _log_norm_stats(arrays: list[np.ndarray]):
    flat = np.concatenate([a.reshape(-1) for a in arrays]).astype(np.float64)
    pos = flat[flat > 0]
    if pos.size == 0:
        raise AllZeroImage("luminance has no positive value to normalize")
    mu = float(np.exp(np.log(pos).mean()))
    logs = np.log1p(flat / mu)
    return mu, float(logs.min()), float(logs.max())


def _apply_log_norm(vals: np.ndarray, stats) -> LuminanceMap:
    mu, lo, hi = stats
    if hi - lo < 1e-12:
        warnings.warn("constant luminance, returning flat 0.5 map",
                      DegenerateRangeWarning)
        return LuminanceMap(np.full(vals.shape, 0.5, np.float32), normalized=True)
    out = (np.log1p(vals.astype(np.float64) / mu) - lo) / (hi - lo)
    out = np.clip(out, 0.0, 1.0).astype(vals.dtype if vals.dtype == np.float64
                                        else np.float32)
    return LuminanceMap(out, normalized=True)


def reproduce_color(hdr: RadianceImage, yh: LuminanceMap, yo: LuminanceMap,
                    nu: float = 0.5) -> LdrImage:
    """Rebuild RGB from tone-mapped luminance via per-channel ratio powers.

    out_c = clip((hdr_c / (yh + eps))^nu * yo, 0, 1); nu controls color
    saturation.
    """
    if not 0 < nu <= 1:
        raise ValueError(f"nu must lie in (0, 1], got {nu}")
    if yh.normalized or not yo.normalized:
        raise ValueError("expected raw yh and normalized yo")
    if hdr.pixels.shape[:2] != yh.shape or yh.shape != yo.shape:
        raise ShapeMismatch(
            f"hdr {hdr.pixels.shape[:2]}, yh {yh.shape}, yo {yo.shape}")
    ratio = hdr.pixels / (yh.values[:, :, None] + COLOR_EPS)
    out = np.power(ratio, nu) * yo.values[:, :, None]
    return LdrImage(np.clip(out, 0.0, 1.0))


def downsample(y, k: int):
    """2x2 average pooling applied k times; k=0 is the identity.

    Accepts a LuminanceMap, a numpy array, or a torch tensor (trailing two
    dims spatial); odd trailing rows/columns are dropped at each halving.
    The torch path keeps gradients intact for loss computation.
    """
    if k < 0 or int(k) != k:
        raise ValueError(f"scale index must be a nonnegative integer, got {k}")
    if k == 0:
        return y
    if isinstance(y, LuminanceMap):
        return LuminanceMap(downsample(y.values, k), normalized=y.normalized)
    shape = y.shape
    if min(shape[-2], shape[-1]) < 2 ** k:
        raise TooSmall(f"cannot downsample {shape[-2:]} by 2^{k}")
    if _is_torch(y):
        import torch.nn.functional as F
        flat = y.reshape(-1, 1, shape[-2], shape[-1])
        for _ in range(k):
            flat = F.avg_pool2d(flat, 2)
        return flat.reshape(*shape[:-2], flat.shape[-2], flat.shape[-1])
    out = np.asarray(y)
    for _ in range(k):
        h, w = out.shape[-2] // 2 * 2, out.shape[-1] // 2 * 2
        out = out[..., :h, :w]
        out = out.reshape(*out.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    return out


def _is_torch(x) -> bool:
    mod = type(x).__module__
    return mod == "torch" or mod.startswith("torch.")


def luminance_stack(frames: Sequence) -> np.ndarray:
    """Stack luminance frames (maps or arrays) into a T x H x W array."""
    return np.stack([_lum_values(f) for f in frames])
