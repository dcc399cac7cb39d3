"""Alternating GAN training loop with staged loss weights.

Each step updates the discriminator on good-LDR frames versus detached
generator outputs, then updates the generator through the frozen
discriminator with the full weighted objective. A non-finite value in any
term aborts the step with both networks rolled back to their pre-step
state.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (GAMMA_RANGE, BatchSampler, SampleConfig, TrainingBatch,
                   build_manifest)
from .errors import (CheckpointMismatch, ConfigError, DegenerateInput,
                     NonFiniteComponent, NonFiniteLoss, OOMBudgetExceeded)
from .imaging import LdrImage, downsample, write_ldr
from .losses import (LossReport, LossWeights, dcl_d_objective, dcl_g_objective,
                     domain_cl_loss, instance_cl_loss, latent_code,
                     naturalness_inter, naturalness_intra, structure_loss,
                     total_generator_loss, tv_loss)
from .model import (Critic, DiscriminatorConfig, GeneratorConfig,
                    ToneMapGenerator, buffer_creation_count, load_checkpoint,
                    save_checkpoint)
from .tmqi import tmqi_q

DEFAULT_LR_G = 1e-5
DEFAULT_LR_D = 1.5e-5
HALVING_PERIOD = 10
GRAD_CLIP = 5.0
VALID_EVERY = 200
VALID_SCENES = 4


# ------------------------------------------------------------- schedules


@dataclass
class Stage:
    """Loss weights active over epochs [start, end); end None = open."""

    start: int
    end: int | None
    weights: LossWeights

    def __post_init__(self):
        if self.start < 0:
            raise ConfigError("stage start must be >= 0")
        if self.end is not None and self.end <= self.start:
            raise ConfigError(f"empty stage [{self.start}, {self.end})")


@dataclass
class StageSchedule:
    stages: list
    lr_g: float = DEFAULT_LR_G
    lr_d: float = DEFAULT_LR_D
    halving_period: int = HALVING_PERIOD

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("schedule needs at least one stage")
        if self.stages[0].start != 0:
            raise ConfigError("first stage must start at epoch 0")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if prev.end != cur.start:
                raise ConfigError(
                    f"stages must tile the epochs: [{prev.start},{prev.end}) "
                    f"then [{cur.start},{cur.end})")
        if self.stages[-1].end is not None:
            raise ConfigError("last stage must be open-ended")
        if min(self.lr_g, self.lr_d) <= 0 or self.halving_period < 1:
            raise ConfigError("learning rates and halving period must be positive")

    def weights_at(self, epoch: int) -> LossWeights:
        if epoch < 0:
            raise ConfigError("epoch must be >= 0")
        for stage in self.stages:
            if stage.start <= epoch and (stage.end is None or epoch < stage.end):
                return stage.weights
        raise ConfigError(f"no stage covers epoch {epoch}")

    def to_dict(self) -> dict:
        return {
            "stages": [{"start": s.start, "end": s.end,
                        "weights": dataclasses.asdict(s.weights)}
                       for s in self.stages],
            "lr_g": self.lr_g, "lr_d": self.lr_d,
            "halving_period": self.halving_period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        stages = [Stage(s["start"], s["end"], LossWeights(**s["weights"]))
                  for s in d["stages"]]
        return cls(stages, d["lr_g"], d["lr_d"], d["halving_period"])


def staged_schedule(lr_g: float = DEFAULT_LR_G, lr_d: float = DEFAULT_LR_D,
                    halving_period: int = HALVING_PERIOD) -> StageSchedule:
    """Default three-stage plan: naturalness terms phase in later."""
    early = LossWeights()
    return StageSchedule([
        Stage(0, 7, early),
        Stage(7, 10, dataclasses.replace(early, lambda4=0.5)),
        Stage(10, None, dataclasses.replace(early, lambda4=0.5, lambda5=0.5,
                                            lambda6=0.2)),
    ], lr_g=lr_g, lr_d=lr_d, halving_period=halving_period)


def fixed_schedule(weights: LossWeights | None = None,
                   lr_g: float = DEFAULT_LR_G, lr_d: float = DEFAULT_LR_D,
                   halving_period: int = HALVING_PERIOD) -> StageSchedule:
    """Single-stage fallback: constant weights for the whole run."""
    return StageSchedule([Stage(0, None, weights or LossWeights())],
                         lr_g=lr_g, lr_d=lr_d, halving_period=halving_period)


def stage_weights(epoch: int, sched: StageSchedule | None = None) -> LossWeights:
    return (sched or staged_schedule()).weights_at(epoch)


def lr_schedule(epoch: int, sched: StageSchedule | None = None) -> tuple:
    """Learning-rate pair for an epoch; both halve every halving_period."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    sched = sched or staged_schedule()
    factor = 0.5 ** (epoch // sched.halving_period)
    return sched.lr_g * factor, sched.lr_d * factor


# ------------------------------------------------------------- config


@dataclass
class TrainConfig:
    roots: dict
    out_dir: str
    mode: str = "video"
    epochs: int = 20
    batch: int = 8
    negatives: int = 16
    clip_len: int = 3
    crop: int = 256
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig | None = None
    schedule: StageSchedule | None = None
    grad_clip: float = GRAD_CLIP
    valid_every: int = VALID_EVERY
    max_steps: int | None = None
    dtype: str = "float32"
    device: str = "cpu"
    memory_budget_mb: float | None = None
    resume: str | None = None
    gamma_range: tuple = GAMMA_RANGE
    log_name: str = "train_log.jsonl"

    def __post_init__(self):
        if self.mode not in ("image", "video"):
            raise ConfigError(f"mode must be image or video, got {self.mode!r}")
        if self.epochs < 1 or self.batch < 1 or self.negatives < 1:
            raise ConfigError("epochs, batch and negatives must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.mode == "image" and self.generator.tfr_enabled:
            # image mode must never allocate a temporal buffer
            self.generator = dataclasses.replace(self.generator, tfr_enabled=False)
        if self.discriminator is None:
            self.discriminator = DiscriminatorConfig(
                channel_multiplier=self.generator.channel_multiplier)
        if self.schedule is None:
            self.schedule = staged_schedule()

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def sample_config(self) -> SampleConfig:
        return SampleConfig(batch=self.batch, negatives=self.negatives,
                            clip_len=self.clip_len, crop=self.crop,
                            mode=self.mode, gamma_range=self.gamma_range)

    def to_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items()
             if k not in ("generator", "discriminator", "schedule")}
        d["roots"] = {k: str(v) for k, v in self.roots.items()}
        d["gamma_range"] = list(self.gamma_range)
        d["generator"] = self.generator.to_dict()
        d["discriminator"] = self.discriminator.to_dict()
        d["schedule"] = self.schedule.to_dict()
        return d


def estimate_step_bytes(gen_cfg: GeneratorConfig, batch: int, clip_len: int,
                        crop: int, dtype_bytes: int = 4) -> int:
    """Coarse activation-memory estimate for one optimization step."""
    per_frame = 0
    for i, c in enumerate(gen_cfg.scale_channels()):
        side = max(1, crop >> i)
        per_frame += 6 * c * side * side
    # forward activations plus retained buffers for the backward pass
    return 2 * batch * clip_len * per_frame * dtype_bytes


# ------------------------------------------------------------- train step


def _safe_tmqi(hdr_frame, ldr_frame) -> float:
    try:
        return tmqi_q(np.asarray(hdr_frame, np.float64),
                      np.clip(np.asarray(ldr_frame, np.float64), 0.0, 1.0))
    except DegenerateInput:
        return 0.0


def _rank_down(frame, k: int):
    return downsample(frame, k) if k > 0 else frame


def _ranking_scale(side: int, max_k: int = 2) -> int:
    k = max_k
    while k > 0 and (side >> k) < 16:
        k -= 1
    return k


def _snapshot(module: torch.nn.Module, optimizer) -> tuple:
    params = [p.detach().clone() for p in module.parameters()]
    return params, copy.deepcopy(optimizer.state_dict())


def _restore(module: torch.nn.Module, optimizer, snap: tuple) -> None:
    params, opt_state = snap
    with torch.no_grad():
        for p, saved in zip(module.parameters(), params):
            p.copy_(saved)
    optimizer.load_state_dict(opt_state)


def _grads_finite(module: torch.nn.Module) -> bool:
    for p in module.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return False
    return True


def train_step(batch: TrainingBatch, models: tuple, weights: LossWeights,
               optimizers: tuple, grad_clip: float = GRAD_CLIP,
               dtype=torch.float32, tmqi_fn=None,
               memory_budget_mb: float | None = None) -> LossReport:
    """One alternating update; returns the per-term report.

    The discriminator steps first on detached outputs, then the generator
    steps through the frozen discriminator. Terms whose weight is zero are
    skipped entirely, so the generator gradient decomposes exactly over
    the active terms. TMQI ranking runs on detached 4x-downsampled frames
    and never carries gradient; degenerate frames rank worst.
    """
    gen, disc = models
    opt_g, opt_d = optimizers
    gen.train()
    disc.train()

    if memory_budget_mb is not None:
        b, t, h, w = batch.hdr_norm.shape
        need = estimate_step_bytes(gen.cfg, b, t, max(h, w),
                                   dtype_bytes=torch.tensor([], dtype=dtype).element_size())
        if need > memory_budget_mb * 2 ** 20:
            raise OOMBudgetExceeded(
                f"step needs ~{need / 2**20:.0f} MiB > budget {memory_budget_mb:.0f} MiB")

    device = next(gen.parameters()).device
    to = lambda a: torch.as_tensor(a, dtype=dtype, device=device)
    hdr_norm = to(batch.hdr_norm)                      # B x T x H x W
    hdr_raw = to(batch.hdr_raw)
    good = to(batch.ldr_good)
    poor = to(batch.ldr_poor)
    b, t = hdr_norm.shape[:2]
    flat = lambda clips: clips.reshape(-1, 1, *clips.shape[-2:])

    out, _ , penult = gen(hdr_norm.unsqueeze(2), return_features=True)
    out_frames = out.squeeze(2)                        # B x T x H x W

    # -- discriminator step (maximize its objective)
    d_snap = _snapshot(disc, opt_d)
    real_logits = disc(flat(good))
    fake_logits = disc(flat(out_frames.detach()))
    d_obj = dcl_d_objective(real_logits, fake_logits)
    if not torch.isfinite(d_obj):
        raise NonFiniteLoss(f"discriminator objective is {float(d_obj)}")
    opt_d.zero_grad(set_to_none=True)
    (-d_obj).backward()
    if not _grads_finite(disc):
        opt_d.zero_grad(set_to_none=True)
        raise NonFiniteLoss("non-finite discriminator gradient")
    torch.nn.utils.clip_grad_norm_(disc.parameters(), grad_clip)
    opt_d.step()

    # -- generator step through the frozen discriminator
    score = tmqi_fn or _safe_tmqi
    components: dict = {"adv_d": float(d_obj.detach())}
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        struct = hdr_norm.new_zeros(())
        for i in range(b):
            struct = struct + structure_loss(hdr_norm[i], out_frames[i])
        components["struct"] = struct / b

        if weights.lambda1 * weights.lambda_adv > 0:
            fake_g = disc(flat(out_frames))
            with torch.no_grad():
                real_g = disc(flat(good))
            components["adv_g"] = -dcl_g_objective(real_g, fake_g)

        if weights.lambda2 > 0:
            z_o = latent_code(disc.features(flat(out_frames)))
            with torch.no_grad():
                z_gl = latent_code(disc.features(flat(good)))
                z_h = latent_code(disc.features(flat(hdr_norm)))
                z_pl = latent_code(disc.features(flat(poor)))
            components["cl_domain"] = domain_cl_loss(z_o, z_gl, z_h, z_pl)

        if weights.lambda3 > 0:
            k = _ranking_scale(min(out_frames.shape[-2:]))
            scores = [score(_rank_down(batch.hdr_raw[i, j], k),
                            _rank_down(out_frames[i, j].detach().cpu().numpy(), k))
                      for i in range(b) for j in range(t)]
            z_gen = latent_code(penult.reshape(-1, *penult.shape[2:]))
            components["cl_instance"] = instance_cl_loss(z_gen, scores)

        if weights.lambda4 > 0:
            nat = hdr_norm.new_zeros(())
            for i in range(b):
                nat = nat + naturalness_inter(good[i], out_frames[i])
            components["nat_inter"] = nat / b

        if weights.lambda5 > 0:
            nat = hdr_norm.new_zeros(())
            for i in range(b):
                nat = nat + naturalness_intra(out_frames[i], hdr_raw[i], score)
            components["nat_intra"] = nat / b

        if weights.lambda6 > 0:
            tv = hdr_norm.new_zeros(())
            for i in range(b):
                tv = tv + tv_loss(out_frames[i])
            components["tv"] = tv / b

        try:
            total, report = total_generator_loss(components, weights)
        except NonFiniteComponent as exc:
            raise NonFiniteLoss(str(exc)) from exc

        opt_g.zero_grad(set_to_none=True)
        total.backward()
        if not _grads_finite(gen):
            opt_g.zero_grad(set_to_none=True)
            raise NonFiniteLoss("non-finite generator gradient")
        torch.nn.utils.clip_grad_norm_(gen.parameters(), grad_clip)
        opt_g.step()
    except NonFiniteLoss:
        _restore(disc, opt_d, d_snap)      # undo the D update of this step
        raise
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)
    return report


# ------------------------------------------------------------- train loop


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _validation_panel(gen: ToneMapGenerator, sampler: BatchSampler,
                      crop: int, dtype, out_dir: Path, step: int) -> None:
    """Render fixed scenes as side-by-side input/output pairs."""
    from .data import _resize_area
    panel_dir = out_dir / "val" / f"step_{step:06d}"
    panel_dir.mkdir(parents=True, exist_ok=True)
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        for i, entry in enumerate(sampler.hdr_pool[:VALID_SCENES]):
            if entry.media == "image":
                norm = sampler._load_image_lums(entry)[0]
            else:
                norm = sampler._load_video_lums(entry)[0][0]
            norm = np.clip(_resize_area(np.asarray(norm, np.float32), crop, crop),
                           0.0, 1.0)
            x = torch.as_tensor(norm, dtype=dtype).reshape(1, 1, 1, crop, crop)
            y = gen(x)[0].reshape(crop, crop).clamp(0, 1).cpu().numpy()
            panel = np.concatenate([norm, y.astype(np.float32)], axis=1)
            write_ldr(LdrImage(np.repeat(panel[:, :, None], 3, axis=2)),
                      panel_dir / f"scene_{i}.png")
    if was_training:
        gen.train()


def train(cfg: TrainConfig) -> dict:
    """Run the staged loop; writes checkpoints, logs and validation panels.

    Returns a summary with the artifact paths and the last step's report.
    Restarting with resume pointing at latest.pt continues the run; in
    float64 the continuation is bit-identical to the uninterrupted run.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))

    dtype = cfg.torch_dtype
    torch.manual_seed(cfg.seed)
    gen = ToneMapGenerator(cfg.generator).to(dtype)
    disc = Critic(cfg.discriminator).to(dtype)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.schedule.lr_g)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.schedule.lr_d)

    manifest = build_manifest(cfg.roots, seed=cfg.seed)
    sampler = BatchSampler(manifest, cfg.sample_config(), seed=cfg.seed)
    spe = sampler.steps_per_epoch()
    total_steps = cfg.epochs * spe
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    start_step = 0
    if cfg.resume is not None:
        payload = load_checkpoint(cfg.resume)
        extra = payload.get("extra") or {}
        if extra.get("seed") != cfg.seed:
            raise CheckpointMismatch(
                f"resume seed {extra.get('seed')} != config seed {cfg.seed}")
        gen.load_state_dict(payload["generator_state"])
        disc.load_state_dict(payload["discriminator_state"])
        opt_g.load_state_dict(extra["optimizer_g"])
        opt_d.load_state_dict(extra["optimizer_d"])
        torch.set_rng_state(extra["torch_rng"])
        start_step = int(extra["step"])

    buffers_before = buffer_creation_count()
    log_path = out_dir / cfg.log_name
    t0 = time.monotonic()
    last_report = None
    skipped = 0

    def _save(tag: str, step: int, epoch: int) -> Path:
        path = out_dir / f"{tag}.pt"
        save_checkpoint(
            path, gen, disc, epoch=epoch,
            extra={"step": step, "seed": cfg.seed,
                   "optimizer_g": opt_g.state_dict(),
                   "optimizer_d": opt_d.state_dict(),
                   "torch_rng": torch.get_rng_state(),
                   "schedule": cfg.schedule.to_dict()})
        return path

    checkpoints = []
    with open(log_path, "a") as log:
        for step in range(start_step, total_steps):
            epoch = step // spe
            lr_g, lr_d = lr_schedule(epoch, cfg.schedule)
            _set_lr(opt_g, lr_g)
            _set_lr(opt_d, lr_d)
            weights = stage_weights(epoch, cfg.schedule)
            batch = sampler.sample(step)
            try:
                report = train_step(batch, (gen, disc), weights, (opt_g, opt_d),
                                    grad_clip=cfg.grad_clip, dtype=dtype,
                                    memory_budget_mb=cfg.memory_budget_mb)
            except NonFiniteLoss as exc:
                skipped += 1
                log.write(json.dumps({"step": step, "epoch": epoch,
                                      "skipped": str(exc)}) + "\n")
                log.flush()
                continue
            last_report = report
            log.write(json.dumps({
                "step": step, "epoch": epoch, "lr_g": lr_g, "lr_d": lr_d,
                "report": dataclasses.asdict(report),
                "wall_time": time.monotonic() - t0}) + "\n")
            log.flush()
            if cfg.valid_every and (step + 1) % cfg.valid_every == 0:
                _validation_panel(gen, sampler, cfg.crop, dtype, out_dir, step + 1)
            if (step + 1) % spe == 0:
                checkpoints.append(_save(f"epoch_{epoch:03d}", step + 1, epoch))
                _save("latest", step + 1, epoch)

    final_epoch = max(0, (total_steps - 1) // spe) if total_steps else 0
    latest = _save("latest", total_steps, final_epoch)
    if cfg.mode == "image" and buffer_creation_count() != buffers_before:
        raise AssertionError("image-mode training instantiated a temporal buffer")
    return {"steps": total_steps - start_step, "epochs": cfg.epochs,
            "steps_per_epoch": spe, "skipped": skipped,
            "checkpoints": [str(p) for p in checkpoints],
            "latest": str(latest), "log": str(log_path),
            "last_report": dataclasses.asdict(last_report) if last_report else None}
