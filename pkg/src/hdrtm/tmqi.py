"""Tone-mapped image quality index.

Q = a * S^alpha + (1 - a) * N^beta combines a multi-scale structural
fidelity term S (local contrast mapped through a contrast sensitivity
model) with a statistical naturalness term N (brightness and contrast
priors). Constants below are the metric's published values.

Conventions fixed here: HDR luminance is min-max rescaled to
[0, 2^32 - 1]; LDR input is [0, 1] and scaled by 255; naturalness blocks
that do not fit are dropped rather than zero-padded; pyramid levels whose
scale falls below the filter window are skipped with the scale weights
renormalized over the remaining levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateInput, ShapeMismatch
from .imaging import LdrImage, LuminanceMap, RadianceImage, extract_luminance

A_MIX = 0.8012
ALPHA = 0.3046
BETA = 0.7088

NUM_LEVELS = 5
LEVEL_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01
C2 = 10.0

NAT_BETA_A = 4.4
NAT_BETA_B = 10.1
NAT_STD_SCALE = 64.29
NAT_MEAN_MU = 115.94
NAT_MEAN_SIGMA = 27.99
NAT_BLOCK = 11

HDR_SCALE_MAX = 2.0 ** 32 - 1
LDR_SCALE = 255.0


@dataclass
class TmqiResult:
    Q: float
    S: float
    N: float


def _gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


_WINDOW = _gaussian_window()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # correlation restricted to fully covered positions
    kh, kw = window.shape
    h, w = img.shape
    out = np.zeros((h - kh + 1, w - kw + 1))
    for i in range(kh):
        for j in range(kw):
            out += window[i, j] * img[i:i + h - kh + 1, j:j + w - kw + 1]
    return out


def _halve(img: np.ndarray) -> np.ndarray:
    # 2x2 mean smoothing (forward-covering window, symmetric far edge)
    # followed by factor-2 decimation
    padded = np.pad(img, ((0, 1), (0, 1)), mode="symmetric")
    sm = (padded[:-1, :-1] + padded[1:, :-1]
          + padded[:-1, 1:] + padded[1:, 1:]) / 4.0
    return sm[0::2, 0::2]


def _csf(freq: float) -> float:
    return 100.0 * 2.6 * (0.0192 + 0.114 * freq) * np.exp(-((0.114 * freq) ** 1.1))


def _s_local(hdr: np.ndarray, ldr: np.ndarray, freq: float) -> float:
    mu1 = _filter_valid(hdr, _WINDOW)
    mu2 = _filter_valid(ldr, _WINDOW)
    sigma1_sq = _filter_valid(hdr * hdr, _WINDOW) - mu1 * mu1
    sigma2_sq = _filter_valid(ldr * ldr, _WINDOW) - mu2 * mu2
    sigma1 = np.sqrt(np.maximum(sigma1_sq, 0.0))
    sigma2 = np.sqrt(np.maximum(sigma2_sq, 0.0))
    sigma12 = _filter_valid(hdr * ldr, _WINDOW) - mu1 * mu2

    u = 128.0 / (1.4 * _csf(freq))
    sig = u / 3.0
    mapped1 = stats.norm.cdf(sigma1, loc=u, scale=sig)
    mapped2 = stats.norm.cdf(sigma2, loc=u, scale=sig)

    s_map = (((2.0 * mapped1 * mapped2 + C1)
              / (mapped1 ** 2 + mapped2 ** 2 + C1))
             * ((sigma12 + C2) / (sigma1 * sigma2 + C2)))
    return float(s_map.mean())


def structural_fidelity(hdr_scaled: np.ndarray, ldr_scaled: np.ndarray):
    """Multi-scale S term; returns (S, per-level values, levels used).

    Levels where the window no longer fits are skipped and the remaining
    level weights renormalized.
    """
    h, l = hdr_scaled.astype(np.float64), ldr_scaled.astype(np.float64)
    freq = 32.0
    s_vals, weights = [], []
    for level in range(NUM_LEVELS):
        freq /= 2.0
        if min(h.shape) >= WINDOW_SIZE:
            s_vals.append(max(_s_local(h, l, freq), 0.0))
            weights.append(LEVEL_WEIGHTS[level])
        h, l = _halve(h), _halve(l)
    if not s_vals:
        raise DegenerateInput(
            f"image {hdr_scaled.shape} too small for the {WINDOW_SIZE} px window")
    w = np.asarray(weights) / np.sum(weights)
    s = float(np.prod(np.asarray(s_vals) ** w))
    return s, s_vals, len(s_vals)


def statistical_naturalness(ldr_scaled: np.ndarray) -> float:
    """N term: brightness and contrast prior densities, peak-normalized."""
    img = ldr_scaled.astype(np.float64)
    h, w = img.shape
    bh, bw = h // NAT_BLOCK, w // NAT_BLOCK
    if bh >= 1 and bw >= 1:
        blocks = (img[:bh * NAT_BLOCK, :bw * NAT_BLOCK]
                  .reshape(bh, NAT_BLOCK, bw, NAT_BLOCK)
                  .transpose(0, 2, 1, 3)
                  .reshape(bh * bw, NAT_BLOCK * NAT_BLOCK))
        sig = float(np.mean(np.std(blocks, axis=1, ddof=1)))
    elif img.size >= 2:
        sig = float(np.std(img, ddof=1))
    else:
        sig = 0.0
    u = float(img.mean())

    beta_mode = (NAT_BETA_A - 1.0) / (NAT_BETA_A + NAT_BETA_B - 2.0)
    pc = (stats.beta.pdf(sig / NAT_STD_SCALE, NAT_BETA_A, NAT_BETA_B)
          / stats.beta.pdf(beta_mode, NAT_BETA_A, NAT_BETA_B))
    pb = (stats.norm.pdf(u, NAT_MEAN_MU, NAT_MEAN_SIGMA)
          / stats.norm.pdf(NAT_MEAN_MU, NAT_MEAN_MU, NAT_MEAN_SIGMA))
    return float(np.clip(pb * pc, 0.0, 1.0))


def _lum_2d(x, what: str) -> np.ndarray:
    if isinstance(x, RadianceImage):
        return extract_luminance(x).values.astype(np.float64)
    if isinstance(x, LdrImage):
        return extract_luminance(x).values.astype(np.float64)
    if isinstance(x, LuminanceMap):
        return x.values.astype(np.float64)
    arr = np.asarray(x, np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        return extract_luminance(arr).values.astype(np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{what}: expected 2-D luminance, got {arr.shape}")
    return arr


def tmqi(hdr_lum, ldr) -> TmqiResult:
    """Score a tone mapping of hdr_lum (raw luminance) by ldr (in [0, 1])."""
    hdr = _lum_2d(hdr_lum, "hdr")
    out = _lum_2d(ldr, "ldr")
    if hdr.shape != out.shape:
        raise ShapeMismatch(f"hdr {hdr.shape} vs ldr {out.shape}")
    if not np.isfinite(hdr).all() or not np.isfinite(out).all():
        raise ValueError("inputs must be finite")
    if out.min() < -1e-6 or out.max() > 1.0 + 1e-6:
        raise ValueError("ldr values must lie in [0, 1]")
    span = hdr.max() - hdr.min()
    if span <= 0:
        raise DegenerateInput("constant HDR luminance cannot be rescaled")
    hdr_scaled = (hdr - hdr.min()) / span * HDR_SCALE_MAX
    ldr_scaled = np.clip(out, 0.0, 1.0) * LDR_SCALE

    s, _, _ = structural_fidelity(hdr_scaled, ldr_scaled)
    n = statistical_naturalness(ldr_scaled)
    q = A_MIX * s ** ALPHA + (1.0 - A_MIX) * n ** BETA
    return TmqiResult(Q=float(q), S=float(s), N=float(n))


def tmqi_q(hdr_lum, ldr) -> float:
    """Q score only; convenient as a ranking callback."""
    return tmqi(hdr_lum, ldr).Q
