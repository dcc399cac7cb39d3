"""Unpaired dataset management.

Manifests index three pools (hdr, ldr_good, ldr_poor) of still images and
frame-directory videos. Training clips are cut deterministically per
(seed, step): stills become synthetic clips by optional area downsampling
followed by independent random crops; videos supply contiguous frame
windows that are height-resized to the crop size before a single shared
crop. HDR luminance is normalized with whole-source statistics before any
cropping, so every crop of a source sees the same mapping.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    ConfigError,
    DuplicatePathWarning,
    EmptyPool,
    InsufficientFrames,
    SourceTooSmall,
)
from .imaging import (
    Clip,
    LdrImage,
    RadianceImage,
    extract_luminance,
    load_clip,
    load_ldr,
    load_radiance,
    normalize_hdr,
    normalize_hdr_clip,
)

KINDS = ("hdr", "ldr_good", "ldr_poor")
MEDIA = ("image", "video")
MANIFEST_FORMAT_VERSION = 1
GAMMA_RANGE = (1.0, 2.8)
DEFAULT_CROP = 256

_HDR_EXTS = {".hdr", ".exr"}
_LDR_EXTS = {".png", ".jpg", ".jpeg"}


# --------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    path: str
    kind: str
    media: str
    height: int
    width: int
    frames: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}")
        if self.media not in MEDIA:
            raise ConfigError(f"unknown media {self.media!r}")


@dataclass
class DatasetManifest:
    entries: list
    seed: int = 0
    format_version: int = MANIFEST_FORMAT_VERSION

    def by_kind(self, kind: str) -> list:
        return [e for e in self.entries if e.kind == kind]

    def require_kinds(self, kinds=KINDS) -> None:
        for kind in kinds:
            if not self.by_kind(kind):
                raise EmptyPool(f"pool {kind!r} is empty")

    def save(self, path) -> None:
        payload = {
            "format_version": self.format_version,
            "seed": self.seed,
            "entries": [dataclasses.asdict(e) for e in self.entries],
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        payload = json.loads(Path(path).read_text())
        if payload.get("format_version") != MANIFEST_FORMAT_VERSION:
            raise ConfigError(
                f"manifest format {payload.get('format_version')} unsupported")
        entries = [ManifestEntry(**e) for e in payload["entries"]]
        return cls(entries, seed=payload.get("seed", 0))


def _probe_entry(path: Path, kind: str) -> ManifestEntry | None:
    if path.is_dir():
        frame_files = sorted(p for p in path.iterdir()
                             if p.suffix.lower() in _HDR_EXTS | _LDR_EXTS)
        if not frame_files:
            return None
        first = _probe_entry(frame_files[0], kind)
        return ManifestEntry(str(path), kind, "video", first.height, first.width,
                             frames=len(frame_files))
    ext = path.suffix.lower()
    if ext in _HDR_EXTS:
        img = load_radiance(path)
        return ManifestEntry(str(path), kind, "image", img.height, img.width)
    if ext in _LDR_EXTS:
        img = load_ldr(path)
        return ManifestEntry(str(path), kind, "image",
                             img.pixels.shape[0], img.pixels.shape[1])
    return None


def build_manifest(roots: dict, seed: int = 0) -> DatasetManifest:
    """Index pool directories into a manifest.

    roots maps each kind to a directory (or list of directories) whose
    lexicographically sorted children become entries: image files directly,
    subdirectories as frame-directory videos. Duplicates are dropped with
    a warning; a requested kind with no usable items raises EmptyPool.
    """
    entries = []
    seen = set()
    for kind, dirs in roots.items():
        if kind not in KINDS:
            raise ConfigError(f"unknown pool kind {kind!r}")
        if isinstance(dirs, (str, Path)):
            dirs = [dirs]
        found = 0
        for root in dirs:
            root = Path(root)
            if not root.is_dir():
                raise EmptyPool(f"pool {kind!r}: {root} is not a directory")
            for child in sorted(root.iterdir()):
                entry = _probe_entry(child, kind)
                if entry is None:
                    continue
                key = str(Path(entry.path).resolve())
                if key in seen:
                    warnings.warn(f"duplicate path skipped: {entry.path}",
                                  DuplicatePathWarning)
                    continue
                seen.add(key)
                entries.append(entry)
                found += 1
        if found == 0:
            raise EmptyPool(f"pool {kind!r} has no usable items")
    return DatasetManifest(entries, seed=seed)


# ------------------------------------------------------- clip synthesis


def draw_gamma(rng: np.random.Generator, lo: float = GAMMA_RANGE[0],
               hi: float = GAMMA_RANGE[1]) -> float:
    """Uniform downsampling ratio draw on [lo, hi]."""
    return float(rng.uniform(lo, hi))


@dataclass
class SyntheticClipSpec:
    gamma: float
    frames: int
    crop: int = DEFAULT_CROP
    seed: int = 0

    def __post_init__(self):
        if not GAMMA_RANGE[0] <= self.gamma <= GAMMA_RANGE[1]:
            raise ConfigError(
                f"gamma {self.gamma} outside {GAMMA_RANGE}")
        if self.frames < 1 or self.crop < 1:
            raise ConfigError("frames and crop must be positive")


def _resize_area(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    return cv2.resize(arr, (new_w, new_h), interpolation=cv2.INTER_AREA)


def synth_clip_from_image(img, spec: SyntheticClipSpec) -> Clip:
    """Cut a synthetic clip from a still by downsampling then random crops.

    The source is area-downsampled by spec.gamma, then spec.frames crops of
    spec.crop px are taken at i.i.d. uniform offsets drawn from a generator
    seeded with spec.seed (per frame: row offset first, then column).
    """
    if isinstance(img, (RadianceImage, LdrImage)):
        pixels, wrap = img.pixels, type(img)
    else:
        pixels, wrap = np.asarray(img, np.float32), None
    h, w = pixels.shape[:2]
    new_h, new_w = int(h / spec.gamma), int(w / spec.gamma)
    if new_h < spec.crop or new_w < spec.crop:
        raise SourceTooSmall(
            f"{(h, w)} / gamma {spec.gamma} -> {(new_h, new_w)} < crop {spec.crop}")
    scaled = pixels if spec.gamma == 1.0 else _resize_area(pixels, new_h, new_w)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    frames = []
    for _ in range(spec.frames):
        y0 = int(rng.integers(0, new_h - spec.crop + 1))
        x0 = int(rng.integers(0, new_w - spec.crop + 1))
        patch = scaled[y0:y0 + spec.crop, x0:x0 + spec.crop]
        frames.append(wrap(patch.copy()) if wrap else patch.copy())
    return Clip(frames)


# ----------------------------------------------------------- batch assembly


@dataclass
class SampleConfig:
    batch: int = 8
    negatives: int = 16
    clip_len: int = 3
    crop: int = DEFAULT_CROP
    mode: str = "video"
    gamma_range: tuple = GAMMA_RANGE

    def __post_init__(self):
        if self.mode not in ("image", "video"):
            raise ConfigError(f"mode must be image or video, got {self.mode!r}")
        if min(self.batch, self.negatives, self.clip_len, self.crop) < 1:
            raise ConfigError("batch, negatives, clip_len and crop must be positive")

    @property
    def effective_clip_len(self) -> int:
        return 1 if self.mode == "image" else self.clip_len


@dataclass
class TrainingBatch:
    """Unpaired crops: HDR inputs, good-LDR exemplars, poor-LDR negatives."""

    hdr_norm: np.ndarray
    hdr_raw: np.ndarray
    ldr_good: np.ndarray
    ldr_poor: np.ndarray
    hdr_sources: list = field(default_factory=list)
    good_sources: list = field(default_factory=list)
    poor_sources: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        h, g, p = map(set, (self.hdr_sources, self.good_sources, self.poor_sources))
        if h & g or h & p or g & p:
            raise ValueError("batch fields must come from disjoint sources")
        shapes = {self.hdr_norm.shape, self.hdr_raw.shape, self.ldr_good.shape}
        if len(shapes) != 1:
            raise ValueError(f"hdr/good field shapes differ: {shapes}")
        if self.ldr_poor.shape[1:] != self.hdr_norm.shape[1:]:
            raise ValueError("poor-LDR clips disagree on clip shape")


class BatchSampler:
    """Deterministic unpaired batch assembly.

    Batch content is a pure function of (manifest, seed, step): every step
    draws from its own seed substream, HDR sources follow per-epoch
    permutations (wrapping the last short batch), and exemplar/negative
    pools are sampled uniformly with replacement. Decoded sources are
    cached in memory, which fits the corpus scales this repo targets.
    """

    def __init__(self, manifest: DatasetManifest, cfg: SampleConfig, seed: int = 0):
        self.manifest = manifest
        self.cfg = cfg
        self.seed = seed
        self.hdr_pool = manifest.by_kind("hdr")
        self.good_pool = manifest.by_kind("ldr_good")
        self.poor_pool = manifest.by_kind("ldr_poor")
        manifest.require_kinds()
        self._cache: dict = {}

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.hdr_pool) / self.cfg.batch)

    # rng substreams: (0, step) for in-step draws, (1, epoch) for the
    # epoch permutation over HDR sources
    def _rng(self, *key) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def sample(self, step: int) -> TrainingBatch:
        cfg = self.cfg
        rng = self._rng(0, step)
        spe = self.steps_per_epoch()
        epoch, pos = divmod(step, spe)
        perm = self._rng(1, epoch).permutation(len(self.hdr_pool))
        idxs = [int(perm[(pos * cfg.batch + i) % len(perm)])
                for i in range(cfg.batch)]

        hdr_norm, hdr_raw, hdr_src = [], [], []
        for i in idxs:
            norm, raw, src = self._hdr_clip(self.hdr_pool[i], rng)
            hdr_norm.append(norm)
            hdr_raw.append(raw)
            hdr_src.append(src)
        good, good_src = self._ldr_clips(self.good_pool, cfg.batch, rng)
        poor, poor_src = self._ldr_clips(self.poor_pool, cfg.negatives, rng)
        return TrainingBatch(
            hdr_norm=np.stack(hdr_norm), hdr_raw=np.stack(hdr_raw),
            ldr_good=np.stack(good), ldr_poor=np.stack(poor),
            hdr_sources=hdr_src, good_sources=good_src, poor_sources=poor_src,
            step=step)

    # ------------------------------------------------------------ loading

    def _load_image_lums(self, entry: ManifestEntry):
        key = ("img", entry.path)
        if key not in self._cache:
            if entry.kind == "hdr":
                lum = extract_luminance(load_radiance(entry.path))
                norm = normalize_hdr(lum)
                self._cache[key] = (norm.values.astype(np.float32),
                                    lum.values.astype(np.float32))
            else:
                lum = extract_luminance(load_ldr(entry.path))
                vals = lum.values.astype(np.float32)
                self._cache[key] = (vals, vals)
        return self._cache[key]

    def _load_video_lums(self, entry: ManifestEntry):
        key = ("vid", entry.path)
        if key not in self._cache:
            clip = load_clip(entry.path)
            if clip.kind is RadianceImage:
                raw = [extract_luminance(f) for f in clip]
                norm = normalize_hdr_clip(raw)
                stacks = (np.stack([m.values for m in norm]).astype(np.float32),
                          np.stack([m.values for m in raw]).astype(np.float32))
            else:
                lums = np.stack([extract_luminance(f).values for f in clip])
                stacks = (lums.astype(np.float32),) * 2
            self._cache[key] = stacks
        return self._cache[key]

    def _resize_height(self, stack: np.ndarray) -> np.ndarray:
        # real videos: scale so height equals the crop size, keep aspect
        t, h, w = stack.shape
        if h == self.cfg.crop and w >= self.cfg.crop:
            return stack
        scale = self.cfg.crop / h
        new_w = max(self.cfg.crop, int(round(w * scale)))
        return np.stack([_resize_area(f, self.cfg.crop, new_w) for f in stack])

    def _hdr_clip(self, entry: ManifestEntry, rng):
        t = self.cfg.effective_clip_len
        if entry.media == "video":
            norm_full, raw_full = self._load_video_lums(entry)
            if norm_full.shape[0] < t:
                raise InsufficientFrames(
                    f"{entry.path}: {norm_full.shape[0]} frames < clip_len {t}")
            start = int(rng.integers(0, norm_full.shape[0] - t + 1))
            norm = self._resize_height(norm_full[start:start + t])
            raw = self._resize_height(raw_full[start:start + t])
            y0, x0 = self._crop_offset(rng, norm.shape[1], norm.shape[2])
            sl = np.s_[:, y0:y0 + self.cfg.crop, x0:x0 + self.cfg.crop]
            return norm[sl], raw[sl], entry.path
        norm_full, raw_full = self._load_image_lums(entry)
        if self.cfg.mode == "image" and rng.integers(0, 2) == 1:
            crop = self.cfg.crop
            norm = _resize_area(norm_full, crop, crop)[None]
            raw = _resize_area(raw_full, crop, crop)[None]
            return np.clip(norm, 0.0, 1.0), np.maximum(raw, 0.0), entry.path
        norm, raw = self._dynamic_crops(norm_full, raw_full, t, rng)
        return norm, raw, entry.path

    def _ldr_clips(self, pool, count: int, rng):
        clips, sources = [], []
        for i in rng.integers(0, len(pool), size=count):
            entry = pool[int(i)]
            t = self.cfg.effective_clip_len
            if entry.media == "video":
                full, _ = self._load_video_lums(entry)
                if full.shape[0] < t:
                    raise InsufficientFrames(
                        f"{entry.path}: {full.shape[0]} frames < clip_len {t}")
                start = int(rng.integers(0, full.shape[0] - t + 1))
                window = self._resize_height(full[start:start + t])
                y0, x0 = self._crop_offset(rng, window.shape[1], window.shape[2])
                clips.append(window[:, y0:y0 + self.cfg.crop,
                                    x0:x0 + self.cfg.crop])
            else:
                full, _ = self._load_image_lums(entry)
                clip, _ = self._dynamic_crops(full, full, t, rng)
                clips.append(clip)
            sources.append(entry.path)
        return clips, sources

    def _dynamic_crops(self, norm_full, raw_full, t: int, rng):
        h, w = norm_full.shape
        crop = self.cfg.crop
        if min(h, w) < crop:
            raise SourceTooSmall(f"source {(h, w)} smaller than crop {crop}")
        lo, hi = self.cfg.gamma_range
        gamma_max = min(hi, min(h, w) / crop)
        gamma = float(rng.uniform(lo, gamma_max)) if gamma_max > lo else lo
        if gamma > 1.0:
            new_h, new_w = int(h / gamma), int(w / gamma)
            norm_full = np.clip(_resize_area(norm_full, new_h, new_w), 0.0, 1.0)
            raw_full = np.maximum(_resize_area(raw_full, new_h, new_w), 0.0)
            h, w = new_h, new_w
        norm_frames, raw_frames = [], []
        for _ in range(t):
            y0, x0 = self._crop_offset(rng, h, w)
            norm_frames.append(norm_full[y0:y0 + crop, x0:x0 + crop])
            raw_frames.append(raw_full[y0:y0 + crop, x0:x0 + crop])
        return np.stack(norm_frames), np.stack(raw_frames)

    def _crop_offset(self, rng, h: int, w: int):
        crop = self.cfg.crop
        if h < crop or w < crop:
            raise SourceTooSmall(f"window {(h, w)} smaller than crop {crop}")
        return (int(rng.integers(0, h - crop + 1)),
                int(rng.integers(0, w - crop + 1)))
