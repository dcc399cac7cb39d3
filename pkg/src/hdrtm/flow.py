"""Dense optical flow and backward warping for temporal metrics.

The default estimator is a coarse-to-fine iterative Lucas-Kanade solver;
any callable (frame1, frame2) -> H x W x 2 displacement field can be
substituted, including an external binary exchanging Middlebury .flo
files through the cache directory.
"""

from __future__ import annotations

import hashlib
import os
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import CorruptFile, HdrtmError, ShapeMismatch
from .imaging import LuminanceMap

CACHE_ENV_VAR = "HDRTM_CACHE_DIR"
FLO_MAGIC = 202021.25


def _as_frame(x) -> np.ndarray:
    arr = x.values if isinstance(x, LuminanceMap) else np.asarray(x)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D frame, got {arr.shape}")
    return arr.astype(np.float64)


def warp(frame, flow):
    """Backward bilinear warp: out(p) = frame(p + flow(p)), borders clamped."""
    arr = _as_frame(frame)
    fl = np.asarray(flow, np.float64)
    h, w = arr.shape
    if fl.shape != (h, w, 2):
        raise ShapeMismatch(f"flow {fl.shape} does not match frame {(h, w)}")
    xs = np.clip(np.arange(w)[None, :] + fl[:, :, 0], 0, w - 1)
    ys = np.clip(np.arange(h)[:, None] + fl[:, :, 1], 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xs - x0
    wy = ys - y0
    out = ((1 - wy) * ((1 - wx) * arr[y0, x0] + wx * arr[y0, x1])
           + wy * ((1 - wx) * arr[y1, x0] + wx * arr[y1, x1]))
    if isinstance(frame, LuminanceMap):
        return LuminanceMap(np.clip(out, 0.0, 1.0) if frame.normalized else out,
                            normalized=frame.normalized)
    return out


@dataclass
class ConstantFlow:
    """Stub estimator returning a fixed displacement everywhere."""

    dx: float = 0.0
    dy: float = 0.0

    def __call__(self, f1, f2) -> np.ndarray:
        a = _as_frame(f1)
        out = np.empty((*a.shape, 2))
        out[:, :, 0] = self.dx
        out[:, :, 1] = self.dy
        return out


@dataclass
class LucasKanadeFlow:
    """Coarse-to-fine iterative Lucas-Kanade with windowed normal equations.

    Estimates the displacement field mapping f1 coordinates toward f2;
    per-level updates are clamped to one pixel and median-filtered, which
    is enough for the small motions temporal metrics care about.
    """

    levels: int = 3
    iterations: int = 5
    window: int = 9
    regularization: float = 1e-4

    def __call__(self, f1, f2) -> np.ndarray:
        a = _as_frame(f1)
        b = _as_frame(f2)
        if a.shape != b.shape:
            raise ShapeMismatch(f"{a.shape} vs {b.shape}")
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        span = max(hi - lo, 1e-12)
        a = (a - lo) / span
        b = (b - lo) / span

        pyr_a, pyr_b = [a], [b]
        for _ in range(self.levels - 1):
            if min(pyr_a[-1].shape) < 8:
                break
            pyr_a.append(cv2.pyrDown(pyr_a[-1]))
            pyr_b.append(cv2.pyrDown(pyr_b[-1]))

        flow = np.zeros((*pyr_a[-1].shape, 2))
        for level in reversed(range(len(pyr_a))):
            la, lb = pyr_a[level], pyr_b[level]
            h, w = la.shape
            if flow.shape[:2] != (h, w):
                flow = cv2.resize(flow, (w, h), interpolation=cv2.INTER_LINEAR)
                flow *= 2.0
            for _ in range(self.iterations):
                warped = warp(lb, flow)
                gy, gx = np.gradient((la + warped) / 2.0)
                it = warped - la
                win = self.window
                s = lambda img: ndimage.uniform_filter(img, win, mode="nearest")
                a11 = s(gx * gx) + self.regularization
                a22 = s(gy * gy) + self.regularization
                a12 = s(gx * gy)
                b1 = -s(gx * it)
                b2 = -s(gy * it)
                det = a11 * a22 - a12 * a12
                det = np.where(np.abs(det) < 1e-12, 1e-12, det)
                du = np.clip((a22 * b1 - a12 * b2) / det, -1.0, 1.0)
                dv = np.clip((a11 * b2 - a12 * b1) / det, -1.0, 1.0)
                flow[:, :, 0] += du
                flow[:, :, 1] += dv
            flow[:, :, 0] = ndimage.median_filter(flow[:, :, 0], 3, mode="nearest")
            flow[:, :, 1] = ndimage.median_filter(flow[:, :, 1], 3, mode="nearest")
        return flow


# ------------------------------------------------------- external estimator


def write_flo(path, flow: np.ndarray) -> None:
    fl = np.asarray(flow, np.float32)
    if fl.ndim != 3 or fl.shape[2] != 2:
        raise ValueError(f"expected H x W x 2 flow, got {fl.shape}")
    h, w = fl.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(fl.tobytes())


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CorruptFile(f"{path} too short for a .flo file")
    magic, w, h = struct.unpack_from("<fii", data)
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise CorruptFile(f"{path} has bad .flo magic {magic}")
    expected = 12 + w * h * 2 * 4
    if len(data) != expected:
        raise CorruptFile(f"{path}: {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, np.float32, offset=12).reshape(h, w, 2).astype(np.float64)


def flow_cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV_VAR)
    base = Path(root) if root else Path(tempfile.gettempdir()) / "hdrtm"
    path = base / "flow"
    path.mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class ExternalFlow:
    """Run an external flow binary: command <frame1.png> <frame2.png> <out.flo>.

    Frames are written as 8-bit grayscale PNGs into the cache directory
    (HDRTM_CACHE_DIR or the system temp dir) keyed by content hash, so
    repeated pairs reuse their files.
    """

    command: str

    def __call__(self, f1, f2) -> np.ndarray:
        a = _as_frame(f1)
        b = _as_frame(f2)
        if a.shape != b.shape:
            raise ShapeMismatch(f"{a.shape} vs {b.shape}")
        cache = flow_cache_dir()
        pa = self._dump(cache, a)
        pb = self._dump(cache, b)
        out = cache / f"{pa.stem}_{pb.stem}.flo"
        result = subprocess.run([self.command, str(pa), str(pb), str(out)],
                                capture_output=True, text=True)
        if result.returncode != 0:
            raise HdrtmError(
                f"flow command failed ({result.returncode}): {result.stderr.strip()}")
        flow = read_flo(out)
        if flow.shape[:2] != a.shape:
            raise ShapeMismatch(f"external flow {flow.shape[:2]} vs frame {a.shape}")
        return flow

    @staticmethod
    def _dump(cache: Path, frame: np.ndarray) -> Path:
        lo, hi = frame.min(), frame.max()
        scaled = (frame - lo) / (hi - lo) if hi > lo else np.zeros_like(frame)
        data = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
        digest = hashlib.sha1(data.tobytes()).hexdigest()[:16]
        path = cache / f"{digest}.png"
        if not path.exists():
            cv2.imwrite(str(path), data)
        return path
