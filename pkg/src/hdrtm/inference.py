"""Checkpoint-backed tone mapping of full-resolution images and clips.

Inputs of arbitrary size are reflect-padded to the generator's spatial
divisor, mapped, and cropped back; video clips stream through a single
temporal buffer so arbitrarily long sequences use constant memory.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch

from .imaging import (
    LdrImage,
    LuminanceMap,
    RadianceImage,
    extract_luminance,
    normalize_hdr,
    normalize_hdr_clip,
    reproduce_color,
)
from .model import ToneMapGenerator, load_generator

DEFAULT_NU = 0.5


def pad_to_multiple(arr: np.ndarray, multiple: int):
    """Reflect-pad the trailing two dims up to a multiple; returns (padded, shape)."""
    h, w = arr.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, (h, w)
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(arr, pad, mode=mode), (h, w)


class TonemapPipeline:
    """Wraps a generator for numpy-in/numpy-out tone mapping."""

    def __init__(self, generator: ToneMapGenerator, nu: float = DEFAULT_NU,
                 device: str = "cpu"):
        self.gen = generator.to(device).eval()
        self.nu = nu
        self.device = device

    @classmethod
    def from_checkpoint(cls, path, nu: float = DEFAULT_NU, device: str = "cpu"):
        return cls(load_generator(path), nu=nu, device=device)

    @property
    def divisor(self) -> int:
        return self.gen.cfg.spatial_divisor * self.gen.cfg.sfe_patch

    def _forward_frames(self, stack: np.ndarray, buffer=None):
        padded, orig = pad_to_multiple(stack.astype(np.float32), self.divisor)
        clip = torch.from_numpy(padded[None, :, None]).to(self.device)
        with torch.no_grad():
            out, buffer = self.gen(clip, buffer)
        result = out[0, :, 0].cpu().numpy()[:, :orig[0], :orig[1]]
        return np.clip(result, 0.0, 1.0), buffer

    def map_luminance(self, norm_frames) -> np.ndarray:
        """Map a stack/list of normalized luminance frames to T x H x W outputs."""
        stack = _norm_stack(norm_frames)
        out, _ = self._forward_frames(stack)
        return out

    def stream_luminance(self, norm_frames: Iterable) -> Iterable[np.ndarray]:
        """Frame-by-frame streaming variant holding one temporal buffer."""
        buffer = None
        for frame in norm_frames:
            stack = _norm_stack([frame])
            out, buffer = self._forward_frames(stack, buffer)
            yield out[0]

    def map_image(self, hdr: RadianceImage) -> LdrImage:
        yh = extract_luminance(hdr)
        yn = normalize_hdr(yh)
        yo = self.map_luminance([yn])[0]
        return reproduce_color(hdr, yh, LuminanceMap(yo, normalized=True), nu=self.nu)

    def map_clip(self, frames: Sequence[RadianceImage]) -> list[LdrImage]:
        """Tone map an HDR clip with shared normalization statistics."""
        raw = [extract_luminance(f) for f in frames]
        norm = normalize_hdr_clip(raw)
        outs = []
        for hdr, yh, yo in zip(frames, raw, self.stream_luminance(norm)):
            outs.append(reproduce_color(hdr, yh, LuminanceMap(yo, normalized=True),
                                        nu=self.nu))
        return outs


def _norm_stack(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        stack = frames
    else:
        stack = np.stack([f.values if isinstance(f, LuminanceMap) else np.asarray(f)
                          for f in frames])
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3:
        raise ValueError(f"expected T x H x W luminance, got {stack.shape}")
    return stack
