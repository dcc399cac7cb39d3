"""Tiny deterministic synthetic corpora for smoke tests and demos.

Scenes are smooth random fields. HDR stills get a wide dynamic range with
sparse strong highlights, so a linear min-max display mapping crushes most
of the scene while a log-like mapping keeps it visible; good LDR exemplars
sit near mid-brightness with moderate local contrast; poor LDR exemplars
are under- or over-exposed with flattened contrast.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import Clip, LdrImage, RadianceImage, save_radiance, write_ldr


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo + 1e-12)


def toy_hdr_scene(rng: np.random.Generator, size: int = 64) -> RadianceImage:
    base = _smooth_field(rng, size, sigma=size / 10)
    radiance = 0.03 + 0.5 * base ** 2
    # sparse bright emitters spanning a few orders of magnitude
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.integers(0, size, size=2)
        strength = float(rng.uniform(20.0, 200.0))
        width = float(rng.uniform(size / 24, size / 10))
        yy, xx = np.mgrid[0:size, 0:size]
        radiance = radiance + strength * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    tint = np.stack([
        0.7 + 0.6 * _smooth_field(rng, size, size / 6) for _ in range(3)], axis=2)
    return RadianceImage((radiance[:, :, None] * tint).astype(np.float32))


def toy_good_ldr(rng: np.random.Generator, size: int = 64) -> LdrImage:
    base = _smooth_field(rng, size, sigma=size / 16)
    texture = _smooth_field(rng, size, sigma=1.5)
    lum = 0.45 + 0.28 * (base - 0.5) * 2 + 0.10 * (texture - 0.5) * 2
    tint = np.stack([
        0.9 + 0.2 * _smooth_field(rng, size, size / 6) for _ in range(3)], axis=2)
    rgb = np.clip(lum[:, :, None] * tint, 0.0, 1.0)
    return LdrImage(rgb.astype(np.float32))


def toy_poor_ldr(rng: np.random.Generator, size: int = 64) -> LdrImage:
    base = _smooth_field(rng, size, sigma=size / 12)
    if rng.integers(0, 2) == 0:
        lum = 0.02 + 0.12 * base ** 2       # under-exposed, crushed blacks
    else:
        lum = 0.85 + 0.14 * base            # washed out highlights
    rgb = np.repeat(np.clip(lum, 0.0, 1.0)[:, :, None], 3, axis=2)
    return LdrImage(rgb.astype(np.float32))


def make_toy_pools(root, n_hdr: int = 20, n_good: int = 20, n_poor: int = 20,
                   size: int = 64, seed: int = 0) -> dict:
    """Write still-image pools under root; returns the kind -> dir mapping."""
    root = Path(root)
    dirs = {
        "hdr": root / "hdr_images",
        "ldr_good": root / "ldr_good",
        "ldr_poor": root / "ldr_poor",
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.Generator(np.random.PCG64(seeds[0]))
    for i in range(n_hdr):
        save_radiance(toy_hdr_scene(rng, size), dirs["hdr"] / f"scene_{i:03d}.exr")
    rng = np.random.Generator(np.random.PCG64(seeds[1]))
    for i in range(n_good):
        write_ldr(toy_good_ldr(rng, size), dirs["ldr_good"] / f"good_{i:03d}.png")
    rng = np.random.Generator(np.random.PCG64(seeds[2]))
    for i in range(n_poor):
        write_ldr(toy_poor_ldr(rng, size), dirs["ldr_poor"] / f"poor_{i:03d}.png")
    return {k: str(v) for k, v in dirs.items()}


def make_toy_hdr_videos(root, count: int = 2, frames: int = 6, size: int = 64,
                        seed: int = 0, drift: float = 1.0) -> list:
    """Write HDR frame-directory clips with slow brightness/shift drift."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    dirs = []
    for i in range(count):
        scene = toy_hdr_scene(rng, size).pixels
        clip_frames = []
        for t in range(frames):
            gain = 1.0 + 0.05 * drift * np.sin(0.7 * t + i)
            shifted = np.roll(scene, shift=int(round(drift * t)) % size, axis=1)
            clip_frames.append(RadianceImage((shifted * gain).astype(np.float32)))
        clip_dir = root / f"clip_{i:03d}"
        from .imaging import write_clip
        write_clip(Clip(clip_frames, fps=24.0), clip_dir)
        dirs.append(clip_dir)
    return dirs
