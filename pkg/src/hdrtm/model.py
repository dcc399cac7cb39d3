"""Tone-mapping generator and discriminator.

The generator is a normalization-free UNet over normalized luminance with a
graph-convolution enhancement block at the bottleneck and an optional
parameter-free temporal splice that carries a fraction of each encoder
feature over from the previous frame. The discriminator is a stride-2 conv
cascade with a global-pooled linear head.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    BetaTooSmall,
    BufferShapeMismatch,
    CheckpointMismatch,
    ShapeMismatch,
    ShapeNotDivisible,
    TooFewNodes,
    TooSmallInput,
)

CHECKPOINT_FORMAT_VERSION = 1
_ALLOWED_MULTIPLIERS = (1.0, 0.75, 0.5)

# instrumentation: counts every TemporalBuffer ever constructed, so tests
# can assert that image-mode code paths never allocate one
_BUFFER_CREATIONS = 0


def buffer_creation_count() -> int:
    return _BUFFER_CREATIONS


# ---------------------------------------------------------------- configs


@dataclass
class GeneratorConfig:
    base_channels: int = 32
    num_scales: int = 4
    channel_multiplier: float = 1.0
    tfr_enabled: bool = False
    tfr_beta: float = 1.0 / 32.0
    sfe_patch: int = 2
    sfe_knn: int = 8

    def __post_init__(self):
        if self.num_scales < 2:
            raise ValueError(f"num_scales must be >= 2, got {self.num_scales}")
        if not any(abs(self.channel_multiplier - m) < 1e-9 for m in _ALLOWED_MULTIPLIERS):
            raise ValueError(
                f"channel_multiplier must be one of {_ALLOWED_MULTIPLIERS}")
        if not 0.0 <= self.tfr_beta <= 1.0:
            raise ValueError(f"tfr_beta must lie in [0, 1], got {self.tfr_beta}")
        if self.sfe_patch < 1 or self.sfe_knn < 1:
            raise ValueError("sfe_patch and sfe_knn must be positive")
        if self.tfr_enabled:
            for c in self.scale_channels():
                if math.floor(self.tfr_beta * c) < 1:
                    raise BetaTooSmall(
                        f"tfr_beta={self.tfr_beta} selects 0 of {c} channels")

    def scale_channels(self) -> list[int]:
        c0 = int(round(self.base_channels * self.channel_multiplier))
        return [c0 * 2 ** i for i in range(self.num_scales)]

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.num_scales - 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DiscriminatorConfig:
    base_channels: int = 32
    num_layers: int = 5
    channel_multiplier: float = 1.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be positive")
        if not any(abs(self.channel_multiplier - m) < 1e-9 for m in _ALLOWED_MULTIPLIERS):
            raise ValueError(
                f"channel_multiplier must be one of {_ALLOWED_MULTIPLIERS}")

    def layer_channels(self) -> list[int]:
        c0 = int(round(self.base_channels * self.channel_multiplier))
        return [c0 * 2 ** i for i in range(self.num_layers)]

    @property
    def feature_channels(self) -> int:
        return self.layer_channels()[-1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------- temporal feature splice


@dataclass
class TemporalBuffer:
    """Per-site storage of the previous frame's split feature channels."""

    slices: dict = field(default_factory=dict)
    frames_seen: int = 0

    def __post_init__(self):
        global _BUFFER_CREATIONS
        _BUFFER_CREATIONS += 1


def tfr_split_channels(beta: float, channels: int) -> int:
    return math.floor(beta * channels)


def tfr_apply(ft, ft_prev, beta: float):
    """Replace the trailing floor(beta*C) channels of ft with ft_prev's.

    Pure channel splice with no parameters and no arithmetic, so it adds
    neither parameters nor multiply-accumulates.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if tuple(ft.shape) != tuple(ft_prev.shape):
        raise ShapeMismatch(f"{tuple(ft.shape)} vs {tuple(ft_prev.shape)}")
    if beta == 0.0:
        return ft
    c = ft.shape[1]
    s = tfr_split_channels(beta, c)
    if s == 0:
        raise BetaTooSmall(f"beta={beta} selects 0 of {c} channels")
    if isinstance(ft, torch.Tensor):
        return torch.cat([ft[:, :c - s], ft_prev[:, c - s:]], dim=1)
    return np.concatenate([ft[:, :c - s], ft_prev[:, c - s:]], axis=1)


# --------------------------------------------------------- building blocks


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with LeakyReLU(0.2), no normalization."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(self.conv2(self.act(self.conv1(x))))


def knn_graph(nodes, k: int):
    """Indices of the k nearest neighbors per node (self excluded).

    nodes: N x D (numpy or torch); neighbors ranked by ascending Euclidean
    distance with stable index tie-breaks. Needs at least k+1 nodes.
    """
    n = nodes.shape[0]
    if n < k + 1:
        raise TooFewNodes(f"{n} nodes cannot supply {k} neighbors each")
    if isinstance(nodes, torch.Tensor):
        d = torch.cdist(nodes[None].double(), nodes[None].double())[0]
        d.fill_diagonal_(math.inf)
        return torch.argsort(d, dim=1, stable=True)[:, :k]
    arr = np.asarray(nodes, np.float64)
    d = np.sqrt(((arr[:, None] - arr[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def _batched_knn(nodes: torch.Tensor, k: int) -> torch.Tensor:
    # nodes: B x N x D, detached; returns B x N x k neighbor indices
    n = nodes.shape[1]
    if n < k + 1:
        raise TooFewNodes(f"{n} nodes cannot supply {k} neighbors each")
    d = torch.cdist(nodes.double(), nodes.double())
    idx = torch.arange(n, device=nodes.device)
    d[:, idx, idx] = math.inf
    return torch.argsort(d, dim=2, stable=True)[:, :, :k]


class GraphFeatureEnhancer(nn.Module):
    """Bottleneck enhancement over non-overlapping patch nodes.

    Each patch is a node embedded by flattening; the node graph is kNN in
    feature space. One max-relative graph convolution is followed by a
    two-layer MLP, both with residual connections, then patches are folded
    back. Neighbor selection is not differentiated through.
    """

    def __init__(self, channels: int, patch: int = 2, knn: int = 8):
        super().__init__()
        self.patch = patch
        self.knn = knn
        self.dim = channels * patch * patch
        hidden = max(self.dim // 4, 1)
        self.embed = nn.Linear(2 * self.dim, self.dim)
        self.mlp = nn.Sequential(
            nn.Linear(self.dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, self.dim))
        self.act = nn.LeakyReLU(0.2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeNotDivisible(f"{(h, w)} not divisible by patch {p}")
        nodes = F.unfold(f, p, stride=p).transpose(1, 2)  # B x N x D
        with torch.no_grad():
            idx = _batched_knn(nodes.detach(), self.knn)
        gather = nodes.unsqueeze(1).expand(-1, nodes.shape[1], -1, -1)
        neigh = torch.gather(
            gather, 2, idx.unsqueeze(-1).expand(-1, -1, -1, self.dim))
        rel = (neigh - nodes.unsqueeze(2)).amax(dim=2)
        x = nodes + self.act(self.embed(torch.cat([nodes, rel], dim=-1)))
        x = x + self.mlp(x)
        folded = F.fold(x.transpose(1, 2), (h, w), p, stride=p)
        return folded


# ---------------------------------------------------------------- generator


class ToneMapGenerator(nn.Module):
    """UNet luminance tone mapper with graph bottleneck and temporal splice."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.scale_channels()
        self.enc = nn.ModuleList(
            ConvBlock(1 if i == 0 else chs[i - 1], chs[i])
            for i in range(cfg.num_scales))
        self.down = nn.ModuleList(
            nn.Conv2d(chs[i], chs[i], 3, stride=2, padding=1)
            for i in range(cfg.num_scales - 1))
        self.sfe = GraphFeatureEnhancer(chs[-1], cfg.sfe_patch, cfg.sfe_knn)
        self.up = nn.ModuleList(
            nn.Conv2d(chs[i + 1], chs[i], 3, padding=1)
            for i in range(cfg.num_scales - 1))
        self.dec = nn.ModuleList(
            ConvBlock(2 * chs[i], chs[i]) for i in range(cfg.num_scales - 1))
        self.head = nn.Conv2d(chs[0], 1, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def set_tfr(self, enabled: bool) -> None:
        """Toggle the temporal splice; the parameters are unaffected."""
        self.cfg = dataclasses.replace(self.cfg, tfr_enabled=enabled)

    def _splice(self, site: int, feat: torch.Tensor, buffer, new_slices: dict):
        if not self.cfg.tfr_enabled:
            return feat
        c = feat.shape[1]
        s = tfr_split_channels(self.cfg.tfr_beta, c)
        cur = feat[:, c - s:]
        prev = buffer.slices.get(site) if buffer is not None else None
        if prev is None:
            prev = cur  # first frame: identity replacement
        elif tuple(prev.shape) != tuple(cur.shape):
            raise BufferShapeMismatch(
                f"site {site}: buffer {tuple(prev.shape)} vs {tuple(cur.shape)}")
        new_slices[site] = cur
        return torch.cat([feat[:, :c - s], prev], dim=1)

    def forward_frame(self, x: torch.Tensor, buffer=None):
        """One frame (B x 1 x H x W) -> (output, penultimate, new slices)."""
        h, w = x.shape[-2:]
        div = self.cfg.spatial_divisor
        if h % div or w % div:
            raise ShapeNotDivisible(f"{(h, w)} not divisible by {div}")
        new_slices: dict = {}
        skips = []
        feat = x
        for i in range(self.cfg.num_scales - 1):
            feat = self.enc[i](feat)
            feat = self._splice(i, feat, buffer, new_slices)
            skips.append(feat)
            feat = self.act(self.down[i](feat))
        feat = self.enc[-1](feat)
        feat = self.sfe(feat)
        feat = self._splice(self.cfg.num_scales - 1, feat, buffer, new_slices)
        for i in reversed(range(self.cfg.num_scales - 1)):
            feat = F.interpolate(feat, scale_factor=2, mode="bilinear",
                                 align_corners=False)
            feat = self.act(self.up[i](feat))
            feat = self.dec[i](torch.cat([feat, skips[i]], dim=1))
        out = torch.sigmoid(self.head(feat))
        return out, feat, new_slices

    def forward(self, clip: torch.Tensor, buffer=None, return_features=False):
        """Tone map a clip (B x T x 1 x H x W) in [0, 1].

        With the temporal splice enabled a TemporalBuffer is created on
        demand and threaded through the frames; without it no buffer is
        ever allocated and frames are processed independently.
        """
        if clip.ndim != 5:
            raise ValueError(f"expected B x T x 1 x H x W clip, got {clip.shape}")
        outs, feats = [], []
        if self.cfg.tfr_enabled:
            if buffer is None:
                buffer = TemporalBuffer()
            for t in range(clip.shape[1]):
                y, feat, new_slices = self.forward_frame(clip[:, t], buffer)
                buffer.slices = new_slices
                buffer.frames_seen += 1
                outs.append(y)
                feats.append(feat)
            # gradients may flow between frames of this clip, but never
            # across separate calls: detach what the stream carries over
            buffer.slices = {k: v.detach() for k, v in buffer.slices.items()}
        else:
            for t in range(clip.shape[1]):
                y, feat, _ = self.forward_frame(clip[:, t], None)
                outs.append(y)
                feats.append(feat)
        out = torch.stack(outs, dim=1)
        if return_features:
            return out, buffer, torch.stack(feats, dim=1)
        return out, buffer


def generator_forward(gen: ToneMapGenerator, clip, buffer=None):
    return gen(clip, buffer)


def generator_penultimate(gen: ToneMapGenerator, clip, buffer=None):
    """Forward pass that also returns features before the output head."""
    return gen(clip, buffer, return_features=True)


# ------------------------------------------------------------ discriminator


class Critic(nn.Module):
    """Stride-2 conv cascade scoring luminance realism, one logit per sample."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        chs = self.cfg.layer_channels()
        layers = []
        c_in = 1
        for c in chs:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1),
                       nn.LeakyReLU(0.2)]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(chs[-1], 1)

    def _check(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim == 3:
            y = y.unsqueeze(1)
        if y.ndim != 4 or y.shape[1] != 1:
            raise ValueError(f"expected B x 1 x H x W, got {tuple(y.shape)}")
        if min(y.shape[-2:]) < 2 ** self.cfg.num_layers:
            raise TooSmallInput(
                f"input {tuple(y.shape[-2:])} below the {2 ** self.cfg.num_layers} px "
                "minimum for the stride-2 cascade")
        return y

    def features(self, y: torch.Tensor) -> torch.Tensor:
        """Activation of the last convolution layer (before pooling)."""
        return self.body(self._check(y))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        feat = self.features(y)
        pooled = feat.mean(dim=(2, 3))
        return self.fc(pooled).squeeze(-1)


def discriminator_score(disc: Critic, y) -> torch.Tensor:
    return disc(y)


def discriminator_features(disc: Critic, y) -> torch.Tensor:
    return disc.features(y)


# ----------------------------------------------------- parameter/MAC counts


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _conv_macs(k: int, c_in: int, c_out: int, h: int, w: int) -> int:
    return k * k * c_in * c_out * h * w


def generator_macs(cfg: GeneratorConfig, h: int, w: int) -> int:
    """Analytic multiply-accumulate count of one generator frame pass.

    The temporal splice contributes zero MACs, so the count is identical
    with tfr_enabled on or off.
    """
    div = cfg.spatial_divisor
    if h % div or w % div:
        raise ShapeNotDivisible(f"{(h, w)} not divisible by {div}")
    chs = cfg.scale_channels()
    total = 0
    hh, ww = h, w
    for i in range(cfg.num_scales):
        c_in = 1 if i == 0 else chs[i - 1]
        total += _conv_macs(3, c_in, chs[i], hh, ww)
        total += _conv_macs(3, chs[i], chs[i], hh, ww)
        if i < cfg.num_scales - 1:
            total += _conv_macs(3, chs[i], chs[i], hh // 2, ww // 2)
            hh, ww = hh // 2, ww // 2
    # bottleneck graph block: pairwise distances + linear layers per node
    p = cfg.sfe_patch
    n = (hh // p) * (ww // p)
    d = chs[-1] * p * p
    hidden = max(d // 4, 1)
    total += n * n * d
    total += n * (2 * d) * d
    total += n * (d * hidden + hidden * d)
    for i in reversed(range(cfg.num_scales - 1)):
        hh, ww = hh * 2, ww * 2
        total += _conv_macs(3, chs[i + 1], chs[i], hh, ww)
        total += _conv_macs(3, 2 * chs[i], chs[i], hh, ww)
        total += _conv_macs(3, chs[i], chs[i], hh, ww)
    total += _conv_macs(3, chs[0], 1, h, w)
    return total


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, generator: ToneMapGenerator, discriminator: Critic | None = None,
                    extra: dict | None = None, epoch: int | None = None) -> None:
    """Write a parameter archive plus a JSON manifest next to it."""
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "generator_config": generator.cfg.to_dict(),
        "generator_state": generator.state_dict(),
        "epoch": epoch,
    }
    if discriminator is not None:
        payload["discriminator_config"] = discriminator.cfg.to_dict()
        payload["discriminator_state"] = discriminator.state_dict()
    if extra:
        payload["extra"] = extra
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": epoch,
        "parameter_count": parameter_count(generator),
        "config": {"generator": generator.cfg.to_dict()},
    }
    if discriminator is not None:
        manifest["config"]["discriminator"] = discriminator.cfg.to_dict()
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatch(
            f"checkpoint format {version} != {CHECKPOINT_FORMAT_VERSION}")
    return payload


def load_generator(path, expect_cfg: GeneratorConfig | None = None) -> ToneMapGenerator:
    payload = load_checkpoint(path)
    cfg = GeneratorConfig(**payload["generator_config"])
    if expect_cfg is not None and cfg.to_dict() != expect_cfg.to_dict():
        raise CheckpointMismatch(
            f"checkpoint config {cfg.to_dict()} != expected {expect_cfg.to_dict()}")
    gen = ToneMapGenerator(cfg)
    try:
        gen.load_state_dict(payload["generator_state"])
    except RuntimeError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    return gen
