"""Unsupervised tone-mapping objectives.

Structure preservation (patch Pearson correlation over scales), the
dual-contrastive adversarial objectives, domain and instance contrastive
losses over latent statistics codes, naturalness patch-statistics matching,
and total variation. All contrastive terms are computed in log space so
they stay finite for logits and code exponents up to |1e4|.

Ops accept numpy arrays, torch tensors, LuminanceMap wrappers, or lists of
frames; they return torch scalars when any input carries gradients through
torch, plain floats otherwise.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    AllScoresEqualWarning,
    BatchTooSmall,
    EmptyBatch,
    LengthMismatch,
    NonFiniteComponent,
    OddDimensions,
    ShapeMismatch,
    TooSmall,
)
from .imaging import LuminanceMap, downsample

PEARSON_EPS = 1e-8
VAR_EPS = 1e-12
DEFAULT_ETA = 1e-2
DEFAULT_C = 1.0


# ------------------------------------------------------------ weights/report


@dataclass
class LossWeights:
    """Term weights; lambda_adv scales the generator-side adversarial term."""

    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.1
    lambda4: float = 0.001
    lambda5: float = 0.001
    lambda6: float = 0.001
    lambda_adv: float = 0.1

    def __post_init__(self):
        for name, value in dataclasses.asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def as_tuple(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3,
                self.lambda4, self.lambda5, self.lambda6)


@dataclass
class LossReport:
    struct: float = 0.0
    adv_d: float = 0.0
    adv_g: float = 0.0
    cl_domain: float = 0.0
    cl_instance: float = 0.0
    nat_inter: float = 0.0
    nat_intra: float = 0.0
    tv: float = 0.0
    total: float = 0.0

    def to_json_line(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))


# ------------------------------------------------------------- coercion


def _coerce(x):
    """Return (tensor, came_from_torch)."""
    if isinstance(x, torch.Tensor):
        return x, True
    if isinstance(x, LuminanceMap):
        return torch.as_tensor(x.values, dtype=torch.float64), False
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], LuminanceMap):
        return torch.as_tensor(np.stack([f.values for f in x]),
                               dtype=torch.float64), False
    arr = np.asarray(x)
    dtype = torch.float64 if arr.dtype != np.float32 else torch.float32
    return torch.as_tensor(arr, dtype=dtype), False


def _ret(value: torch.Tensor, torch_in: bool):
    return value if torch_in else float(value)


def _as_clip(x) -> tuple[torch.Tensor, bool]:
    t, is_torch = _coerce(x)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3:
        raise ValueError(f"expected clip (T x H x W) or frame, got {tuple(t.shape)}")
    return t, is_torch


def _as_codes(x) -> tuple[torch.Tensor, bool]:
    t, is_torch = _coerce(x)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise ValueError(f"expected codes (N x D), got {tuple(t.shape)}")
    return t, is_torch


def _as_logits(x) -> tuple[torch.Tensor, bool]:
    t, is_torch = _coerce(x)
    t = t.reshape(-1)
    if t.numel() == 0:
        raise EmptyBatch("need at least one logit")
    return t, is_torch


def _patch_moments(x: torch.Tensor, patch: int, step: int):
    """Flattened patch means and centered patches, (L,) and (L, patch*patch).

    Centering before the second moment avoids the catastrophic
    cancellation of E[x^2] - m^2 on near-constant patches.
    """
    cols = F.unfold(x.reshape(1, 1, *x.shape[-2:]), patch, stride=step)[0]
    m = cols.mean(dim=0)
    return m, (cols - m).transpose(0, 1)


def _patch_stats(x: torch.Tensor, patch: int, step: int):
    """Per-position patch mean and population variance maps."""
    h, w = x.shape[-2:]
    out_h = (h - patch) // step + 1
    out_w = (w - patch) // step + 1
    m, centered = _patch_moments(x, patch, step)
    var = centered.pow(2).mean(dim=1)
    return m.reshape(out_h, out_w), var.reshape(out_h, out_w)


# ------------------------------------------------------- structure loss


def pearson_patch_corr(i1, i2, patch: int = 5, step: int = 1):
    """Mean Pearson correlation over dense patches of two luminance maps.

    Constant patches (zero variance) contribute correlation 0; the
    denominator carries an epsilon guard.
    """
    x1, t1 = _coerce(i1)
    x2, t2 = _coerce(i2)
    if x1.shape != x2.shape:
        raise ShapeMismatch(f"{tuple(x1.shape)} vs {tuple(x2.shape)}")
    if x1.ndim != 2:
        raise ValueError(f"expected 2-D maps, got {tuple(x1.shape)}")
    if min(x1.shape) < patch:
        raise TooSmall(f"map {tuple(x1.shape)} smaller than patch {patch}")
    _, c1 = _patch_moments(x1, patch, step)
    _, c2 = _patch_moments(x2, patch, step)
    v1 = c1.pow(2).mean(dim=1)
    v2 = c2.pow(2).mean(dim=1)
    cov = (c1 * c2).mean(dim=1)
    # the in-sqrt guard keeps the gradient finite on constant patches
    sigma = torch.sqrt(v1 + VAR_EPS) * torch.sqrt(v2 + VAR_EPS)
    rho = cov / (sigma + PEARSON_EPS)
    return _ret(rho.mean(), t1 or t2)


def structure_loss(yh, yo, patch: int = 5, scales=(0, 1, 2), step: int = 1):
    """Sum over frames and scales of (1 - patch Pearson correlation).

    Zero when the output is any positive affine map of the input; the
    scales index 2x2 average-pooling halvings of both clips. When a
    downsampled map falls below the patch size the patch shrinks to the
    map, so one whole-map correlation remains.
    """
    a, ta = _as_clip(yh)
    b, tb = _as_clip(yo)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    torch_in = ta or tb
    total = a.new_zeros(())
    for t in range(a.shape[0]):
        for k in scales:
            da = downsample(a[t], k)
            db = downsample(b[t], k)
            p_eff = min(patch, da.shape[-2], da.shape[-1])
            rho = pearson_patch_corr(da, db, patch=p_eff, step=step)
            total = total + (1.0 - rho)
    return _ret(total, torch_in)


# ------------------------------------------------------------ latent codes


def latent_code(f):
    """Per-sample statistics code [mu_1..mu_q, tau_1..tau_q].

    mu_i and tau_i are the spatial mean and population standard deviation
    of channel i, so the code length is twice the channel count and the
    whole code scales linearly with the feature map.
    """
    x, torch_in = _coerce(f)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ValueError(f"expected B x C x H x W features, got {tuple(x.shape)}")
    mu = x.mean(dim=(2, 3))
    # tiny guard: keeps the gradient finite on spatially constant channels
    tau = (x.var(dim=(2, 3), unbiased=False) + 1e-20).sqrt()
    code = torch.cat([mu, tau], dim=1)
    return code if torch_in else code.numpy()


def similarity_exponent(u, v, eta: float = DEFAULT_ETA, c: float = DEFAULT_C):
    """Exponent of the similarity kernel: u.v / (eta + c * ||u - v||_1)."""
    a, ta = _coerce(u)
    b, tb = _coerce(v)
    a, b = a.reshape(-1), b.reshape(-1)
    if a.numel() != b.numel():
        raise LengthMismatch(f"{a.numel()} vs {b.numel()}")
    if eta <= 0 or c < 0:
        raise ValueError(f"need eta > 0 and c >= 0, got eta={eta}, c={c}")
    e = (a * b).sum() / (eta + c * (a - b).abs().sum())
    return _ret(e, ta or tb)


def similarity(u, v, eta: float = DEFAULT_ETA, c: float = DEFAULT_C):
    """Similarity kernel exp(u.v / (eta + c * ||u - v||_1)).

    The raw kernel can overflow for long, well-aligned codes; the
    contrastive losses therefore work with similarity_exponent in log
    space and never exponentiate directly.
    """
    e = similarity_exponent(u, v, eta=eta, c=c)
    if isinstance(e, torch.Tensor):
        return torch.exp(e)
    return math.exp(e)


def _pairwise_exponent(a: torch.Tensor, b: torch.Tensor, eta: float, c: float):
    dots = a @ b.T
    l1 = torch.cdist(a, b, p=1)
    return dots / (eta + c * l1)


def _paired_exponent(a: torch.Tensor, b: torch.Tensor, eta: float, c: float):
    dots = (a * b).sum(dim=1)
    l1 = (a - b).abs().sum(dim=1)
    return dots / (eta + c * l1)


# -------------------------------------------------------- contrastive losses


def domain_cl_loss(z_o, z_gl, z_h, z_pl,
                   eta: float = DEFAULT_ETA, c: float = DEFAULT_C):
    """Pull outputs toward good-LDR codes, away from HDR and poor-LDR codes.

    Per anchor: -log(s_pos / (s_pos + sum s_neg)) summed for both negative
    domains, averaged over anchors. Positives pair cyclically when the
    anchor and positive batches differ in size.
    """
    zo, t0 = _as_codes(z_o)
    zg, t1 = _as_codes(z_gl)
    zh, t2 = _as_codes(z_h)
    zp, t3 = _as_codes(z_pl)
    torch_in = t0 or t1 or t2 or t3
    if zo.shape[0] == 0 or zg.shape[0] == 0:
        raise EmptyBatch("anchors and positives must be nonempty")
    if zh.shape[0] == 0 or zp.shape[0] == 0:
        raise EmptyBatch("both negative sets must be nonempty")
    dims = {zo.shape[1], zg.shape[1], zh.shape[1], zp.shape[1]}
    if len(dims) != 1:
        raise LengthMismatch(f"code lengths differ: {sorted(dims)}")
    paired = zg[torch.arange(zo.shape[0]) % zg.shape[0]]
    e_pos = _paired_exponent(zo, paired, eta, c)
    e_h = _pairwise_exponent(zo, zh, eta, c)
    e_p = _pairwise_exponent(zo, zp, eta, c)
    loss = (F.softplus(torch.logsumexp(e_h, dim=1) - e_pos)
            + F.softplus(torch.logsumexp(e_p, dim=1) - e_pos)).mean()
    return _ret(loss, torch_in)


def instance_cl_loss(z_batch, scores,
                     eta: float = DEFAULT_ETA, c: float = DEFAULT_C):
    """Within-batch contrast toward the best-scored sample, away from the worst.

    scores rank the generated samples (higher is better) and are never
    differentiated through; selection ties break toward the lowest index.
    """
    z, torch_in = _as_codes(z_batch)
    s = np.asarray([float(v) for v in scores], np.float64)
    if s.ndim != 1 or s.size != z.shape[0]:
        raise LengthMismatch(f"{s.size} scores for {z.shape[0]} codes")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if z.shape[0] < 3:
        raise BatchTooSmall(f"need batch >= 3, got {z.shape[0]}")
    if np.ptp(s) == 0:
        warnings.warn("all ranking scores equal; selection falls back to "
                      "index order", AllScoresEqualWarning)
    pos = int(np.argmax(s))
    neg = int(np.argmin(s))
    anchors = [i for i in range(z.shape[0]) if i not in (pos, neg)]
    za = z[anchors]
    e_pos = _paired_exponent(za, z[pos].expand_as(za), eta, c)
    e_neg = _paired_exponent(za, z[neg].expand_as(za), eta, c)
    loss = F.softplus(e_neg - e_pos).mean()
    return _ret(loss, torch_in)


# -------------------------------------------------- adversarial objectives


def dcl_d_objective(real_logits, fake_logits):
    """Discriminator-side dual-contrastive objective (to be maximized).

    Mean over real anchors of log(e^r / (e^r + sum_f e^f)) plus mean over
    fake anchors of log(e^-f / (e^-f + sum_r e^-r)), evaluated via
    softplus/logsumexp so it cannot overflow.
    """
    r, tr = _as_logits(real_logits)
    f, tf = _as_logits(fake_logits)
    t1 = -F.softplus(torch.logsumexp(f, dim=0) - r).mean()
    t2 = -F.softplus(torch.logsumexp(-r, dim=0) + f).mean()
    return _ret(t1 + t2, tr or tf)


def dcl_g_objective(real_logits, fake_logits):
    """Generator-side dual-contrastive objective with swapped roles.

    Mean over real anchors of log(e^-r / (e^-r + sum_f e^-f)) plus mean
    over fake anchors of log(e^f / (e^f + sum_r e^r)). The generator's
    training term is the negation of this value, which rises as fake
    logits overtake real ones; gradients should reach it only through the
    fake logits.
    """
    r, tr = _as_logits(real_logits)
    f, tf = _as_logits(fake_logits)
    t1 = -F.softplus(torch.logsumexp(-f, dim=0) + r).mean()
    t2 = -F.softplus(torch.logsumexp(r, dim=0) - f).mean()
    return _ret(t1 + t2, tr or tf)


# ------------------------------------------------------- naturalness losses


def naturalness_stats_dist(i1, i2, patch: int = 11, step: int = 1):
    """Mean absolute differences of dense patch variance and mean maps.

    Returns (phi_sigma, phi_mean); both vanish iff the two maps share all
    patch statistics, and phi_sigma ignores constant offsets.
    """
    x1, t1 = _coerce(i1)
    x2, t2 = _coerce(i2)
    if x1.shape != x2.shape:
        raise ShapeMismatch(f"{tuple(x1.shape)} vs {tuple(x2.shape)}")
    if x1.ndim != 2:
        raise ValueError(f"expected 2-D maps, got {tuple(x1.shape)}")
    if min(x1.shape) < patch:
        raise TooSmall(f"map {tuple(x1.shape)} smaller than patch {patch}")
    m1, v1 = _patch_stats(x1, patch, step)
    m2, v2 = _patch_stats(x2, patch, step)
    phi_sigma = (v1 - v2).abs().mean()
    phi_mean = (m1 - m2).abs().mean()
    torch_in = t1 or t2
    return _ret(phi_sigma, torch_in), _ret(phi_mean, torch_in)


def naturalness_inter(ygl, yo, patch: int = 11, step: int = 1):
    """Patch-statistics distance to an unpaired good-LDR clip, summed over t."""
    a, ta = _as_clip(ygl)
    b, tb = _as_clip(yo)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    torch_in = ta or tb
    total = b.new_zeros(())
    for t in range(a.shape[0]):
        ps, pm = naturalness_stats_dist(a[t], b[t], patch=patch, step=step)
        total = total + ps + pm
    return _ret(total, torch_in)


def select_best_quadrant(hdr_frame, out_frame, tmqi_fn,
                         rank_downsample: int = 4) -> int:
    """Index (row-major) of the output quadrant scoring highest under tmqi_fn.

    Scoring runs on detached, downsampled copies; it only ranks and is
    never differentiated through. Ties break toward the lowest index.
    """
    hdr, _ = _coerce(hdr_frame)
    out, _ = _coerce(out_frame)
    if hdr.shape != out.shape:
        raise ShapeMismatch(f"{tuple(hdr.shape)} vs {tuple(out.shape)}")
    h, w = hdr.shape
    if h % 2 or w % 2:
        raise OddDimensions(f"frame {(h, w)} must have even dimensions")
    hdr_np = hdr.detach().cpu().numpy()
    out_np = out.detach().cpu().numpy()
    k = _rank_scale(min(h, w) // 2, rank_downsample)
    scores = []
    for qh, qo in zip(_quadrants(hdr_np), _quadrants(out_np)):
        scores.append(float(tmqi_fn(downsample(qh, k), downsample(qo, k))))
    return int(np.argmax(scores))


def _quadrants(frame):
    h, w = frame.shape[-2] // 2, frame.shape[-1] // 2
    return (frame[..., :h, :w], frame[..., :h, w:],
            frame[..., h:, :w], frame[..., h:, w:])


def _rank_scale(quad_dim: int, rank_downsample: int) -> int:
    # keep ranked quadrants at >= 16 px so the quality metric stays defined
    factor = max(1, rank_downsample)
    while factor > 1 and quad_dim // factor < 16:
        factor //= 2
    return int(math.log2(factor))


def naturalness_intra(yo, hdr, tmqi_fn, patch: int = 11, step: int = 1,
                      rank_downsample: int = 4):
    """Patch-statistics distance to the output's own best-exposed quadrant.

    Per frame, the 2x2 quadrant scoring highest under tmqi_fn against the
    matching raw-HDR quadrant is the reference; its mean patch statistics
    are compared against the full frame's mean patch statistics.
    """
    out, torch_in = _as_clip(yo)
    ref, _ = _as_clip(hdr)
    if out.shape != ref.shape:
        raise ShapeMismatch(f"{tuple(out.shape)} vs {tuple(ref.shape)}")
    if out.shape[-2] % 2 or out.shape[-1] % 2:
        raise OddDimensions(f"frames {tuple(out.shape[-2:])} must be even-sized")
    total = out.new_zeros(())
    for t in range(out.shape[0]):
        best = select_best_quadrant(ref[t], out[t], tmqi_fn,
                                    rank_downsample=rank_downsample)
        quad = _quadrants(out[t])[best]
        mq, vq = _patch_stats(quad, patch, step)
        mf, vf = _patch_stats(out[t], patch, step)
        total = total + (vq.mean() - vf.mean()).abs() + (mq.mean() - mf.mean()).abs()
    return _ret(total, torch_in)


# ------------------------------------------------------------------- TV


def tv_loss(yo):
    """Sum over frames of (mean |forward dx| + mean |forward dy|)^2."""
    y, torch_in = _as_clip(yo)
    t_, h, w = y.shape
    if h < 2 and w < 2:
        raise TooSmall(f"frame {(h, w)} has no gradient positions")
    total = y.new_zeros(())
    for t in range(t_):
        frame = y[t]
        mx = (frame[:, 1:] - frame[:, :-1]).abs().mean() if w >= 2 else y.new_zeros(())
        my = (frame[1:, :] - frame[:-1, :]).abs().mean() if h >= 2 else y.new_zeros(())
        total = total + (mx + my) ** 2
    return _ret(total, torch_in)


# ------------------------------------------------------------- aggregation


_REPORT_TERMS = ("struct", "adv_d", "adv_g", "cl_domain", "cl_instance",
                 "nat_inter", "nat_intra", "tv")


def total_generator_loss(components: dict, weights: LossWeights):
    """Weighted sum of generator-side terms plus a per-term report.

    components maps term names to scalars; missing terms count as zero and
    adv_d is bookkeeping only (the discriminator maximizes it in its own
    step). Returns (total, LossReport) where total is a tensor when any
    component is one.
    """
    unknown = set(components) - set(_REPORT_TERMS)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    checked = {}
    for name, value in components.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteComponent(f"loss term {name!r} is {v}")
        checked[name] = v
    zero = 0.0
    get = lambda k: components.get(k, zero)
    total = (get("struct")
             + weights.lambda1 * weights.lambda_adv * get("adv_g")
             + weights.lambda2 * get("cl_domain")
             + weights.lambda3 * get("cl_instance")
             + weights.lambda4 * get("nat_inter")
             + weights.lambda5 * get("nat_intra")
             + weights.lambda6 * get("tv"))
    report = LossReport(
        **{name: checked.get(name, 0.0) for name in _REPORT_TERMS},
        total=float(total.detach()) if torch.is_tensor(total) else float(total))
    return total, report
