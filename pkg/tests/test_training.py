"""Schedules, alternating step semantics, full loop, resume identity."""

import copy
import dataclasses
import json

import numpy as np
import pytest
import torch

import hdrtm.training as training
from hdrtm.data import BatchSampler, SampleConfig, build_manifest
from hdrtm.errors import (CheckpointMismatch, ConfigError, NonFiniteLoss,
                          OOMBudgetExceeded)
from hdrtm.losses import LossWeights, dcl_d_objective, structure_loss
from hdrtm.model import (Critic, DiscriminatorConfig, GeneratorConfig,
                         ToneMapGenerator, buffer_creation_count,
                         load_generator)
from hdrtm.training import (Stage, StageSchedule, TrainConfig,
                            estimate_step_bytes, fixed_schedule, lr_schedule,
                            stage_weights, staged_schedule, train, train_step)

EARLY = (1.0, 0.5, 0.1, 0.001, 0.001, 0.001)


# -------------------------------------------------------------- schedules


def test_stage_weights_early():
    assert stage_weights(0).as_tuple() == EARLY
    assert stage_weights(6).as_tuple() == EARLY


def test_stage_weights_middle():
    w = stage_weights(8)
    assert w.lambda4 == 0.5
    assert w.lambda5 == 0.001 and w.lambda6 == 0.001
    assert (w.lambda1, w.lambda2, w.lambda3) == (1.0, 0.5, 0.1)
    assert stage_weights(7).lambda4 == 0.5
    assert stage_weights(9).lambda4 == 0.5


def test_stage_weights_late():
    w = stage_weights(15)
    assert (w.lambda4, w.lambda5, w.lambda6) == (0.5, 0.5, 0.2)
    assert stage_weights(10).lambda5 == 0.5


def test_stage_monotonicity():
    l4 = [stage_weights(e).lambda4 for e in range(20)]
    assert all(a <= b for a, b in zip(l4, l4[1:]))
    first_l4 = next(e for e in range(20) if stage_weights(e).lambda4 > 0.001)
    first_l56 = next(e for e in range(20) if stage_weights(e).lambda5 > 0.001)
    assert first_l4 < first_l56


def test_lr_schedule_values():
    assert lr_schedule(0) == (1e-5, 1.5e-5)
    assert lr_schedule(10) == (5e-6, 7.5e-6)
    assert lr_schedule(25) == (2.5e-6, 3.75e-6)


def test_fixed_schedule_constant():
    sched = fixed_schedule(LossWeights(1, 0, 0, 0, 0, 0))
    for epoch in (0, 5, 50):
        assert stage_weights(epoch, sched).as_tuple() == (1, 0, 0, 0, 0, 0)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        StageSchedule([Stage(1, None, LossWeights())])
    with pytest.raises(ConfigError):
        StageSchedule([Stage(0, 5, LossWeights()), Stage(6, None, LossWeights())])
    with pytest.raises(ConfigError):
        StageSchedule([Stage(0, 5, LossWeights())])  # last must be open
    with pytest.raises(ConfigError):
        Stage(3, 3, LossWeights())


def test_schedule_dict_roundtrip():
    sched = staged_schedule(lr_g=2e-5, lr_d=3e-5, halving_period=4)
    back = StageSchedule.from_dict(sched.to_dict())
    assert back.to_dict() == sched.to_dict()
    assert lr_schedule(4, back) == (1e-5, 1.5e-5)


def test_estimate_step_bytes_monotone():
    cfg = GeneratorConfig(channel_multiplier=0.5)
    small = estimate_step_bytes(cfg, 2, 1, 64)
    assert small > 0
    assert estimate_step_bytes(cfg, 4, 1, 64) == 2 * small
    assert estimate_step_bytes(cfg, 2, 3, 64) == 3 * small


def test_ranking_scale():
    assert training._ranking_scale(64) == 2
    assert training._ranking_scale(32) == 1
    assert training._ranking_scale(16) == 0


def test_safe_tmqi_degenerate():
    flat = np.full((32, 32), 2.0)
    assert training._safe_tmqi(flat, flat * 0.25) == 0.0


# ---------------------------------------------------------- step fixtures


def _models(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    gen = ToneMapGenerator(GeneratorConfig(channel_multiplier=0.5,
                                           tfr_beta=1 / 16, sfe_knn=3)).to(dtype)
    disc = Critic(DiscriminatorConfig(channel_multiplier=0.5)).to(dtype)
    return gen, disc


def _opts(gen, disc, lr=1e-4):
    return (torch.optim.Adam(gen.parameters(), lr=lr),
            torch.optim.Adam(disc.parameters(), lr=1.5 * lr))


def _batch(toy_manifest, batch=2, negatives=3, crop=32, seed=0, step=0):
    cfg = SampleConfig(batch=batch, negatives=negatives, clip_len=1,
                       crop=crop, mode="image")
    return BatchSampler(toy_manifest, cfg, seed=seed).sample(step)


STRUCT_ONLY = LossWeights(0, 0, 0, 0, 0, 0, lambda_adv=0.0)


# -------------------------------------------------------------- train_step


def test_d_step_improves_objective(toy_manifest):
    batch = _batch(toy_manifest)
    gen, disc = _models(1)
    opt_g, opt_d = _opts(gen, disc)
    flat = lambda a: torch.as_tensor(a).reshape(-1, 1, *a.shape[-2:])
    good = flat(batch.ldr_good)
    with torch.no_grad():
        outs = gen(torch.as_tensor(batch.hdr_norm).unsqueeze(2))[0].squeeze(2)
        outs = outs.reshape(-1, 1, *outs.shape[-2:])
        before = float(dcl_d_objective(disc(good), disc(outs)))
    train_step(batch, (gen, disc), STRUCT_ONLY, (opt_g, opt_d))
    with torch.no_grad():
        after = float(dcl_d_objective(disc(good), disc(outs)))
    assert after > before


def test_structure_only_gradient_decomposition(toy_manifest):
    batch = _batch(toy_manifest)
    gen_a, disc_a = _models(2)
    train_step(batch, (gen_a, disc_a), STRUCT_ONLY, _opts(gen_a, disc_a))

    gen_b, _ = _models(2)  # identical init
    opt_b = torch.optim.Adam(gen_b.parameters(), lr=1e-4)
    norm = torch.as_tensor(batch.hdr_norm)
    out = gen_b(norm.unsqueeze(2))[0].squeeze(2)
    loss = sum(structure_loss(norm[i], out[i])
               for i in range(norm.shape[0])) / norm.shape[0]
    opt_b.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(gen_b.parameters(), training.GRAD_CLIP)
    opt_b.step()

    for pa, pb in zip(gen_a.parameters(), gen_b.parameters()):
        assert torch.allclose(pa, pb, atol=1e-6)


def test_report_total_bookkeeping(toy_manifest):
    batch = _batch(toy_manifest, batch=3)
    gen, disc = _models(3)
    weights = stage_weights(15)  # all terms active
    report = train_step(batch, (gen, disc), weights, _opts(gen, disc))
    want = (report.struct
            + weights.lambda1 * weights.lambda_adv * report.adv_g
            + weights.lambda2 * report.cl_domain
            + weights.lambda3 * report.cl_instance
            + weights.lambda4 * report.nat_inter
            + weights.lambda5 * report.nat_intra
            + weights.lambda6 * report.tv)
    assert report.total == pytest.approx(want, rel=1e-5, abs=1e-5)
    assert all(np.isfinite(v) for v in dataclasses.asdict(report).values())


def test_step_determinism(toy_manifest):
    batch = _batch(toy_manifest, batch=3)
    reports = []
    for _ in range(2):
        gen, disc = _models(4)
        reports.append(train_step(batch, (gen, disc), stage_weights(0),
                                  _opts(gen, disc)))
    assert reports[0] == reports[1]


def test_nonfinite_rolls_back_all_state(toy_manifest, monkeypatch):
    batch = _batch(toy_manifest)
    gen, disc = _models(5)
    opt_g, opt_d = _opts(gen, disc)
    gen_before = [p.detach().clone() for p in gen.parameters()]
    disc_before = [p.detach().clone() for p in disc.parameters()]
    monkeypatch.setattr(training, "structure_loss",
                        lambda *a, **k: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLoss):
        train_step(batch, (gen, disc), STRUCT_ONLY, (opt_g, opt_d))
    for p, want in zip(gen.parameters(), gen_before):
        assert torch.equal(p, want)
    for p, want in zip(disc.parameters(), disc_before):
        assert torch.equal(p, want)  # D update of the aborted step undone
    assert len(opt_d.state) == 0
    assert all(p.requires_grad for p in disc.parameters())


def test_memory_budget_guard(toy_manifest):
    batch = _batch(toy_manifest)
    gen, disc = _models(6)
    before = [p.detach().clone() for p in gen.parameters()]
    with pytest.raises(OOMBudgetExceeded):
        train_step(batch, (gen, disc), STRUCT_ONLY, _opts(gen, disc),
                   memory_budget_mb=0.01)
    for p, want in zip(gen.parameters(), before):
        assert torch.equal(p, want)


# ------------------------------------------------------------- train loop


def _train_cfg(toy_pools, out, **kw):
    base = dict(
        roots=dict(toy_pools), out_dir=str(out), mode="image", epochs=1,
        batch=3, negatives=4, clip_len=1, crop=32, seed=11,
        generator=GeneratorConfig(channel_multiplier=0.5, tfr_beta=1 / 16,
                                  sfe_knn=3),
        schedule=fixed_schedule(lr_g=1e-4, lr_d=1.5e-4),
        valid_every=0, gamma_range=(1.0, 1.0))
    base.update(kw)
    return TrainConfig(**base)


def test_train_logs_ceil_items_over_batch(toy_pools, tmp_path):
    summary = train(_train_cfg(toy_pools, tmp_path / "run"))
    assert summary["steps_per_epoch"] == 3  # ceil(8 / 3)
    assert summary["steps"] == 3
    lines = [json.loads(l) for l in
             open(summary["log"]) if l.strip()]
    assert len(lines) == 3
    assert [l["step"] for l in lines] == [0, 1, 2]
    assert lines[0]["lr_g"] == 1e-4
    assert all(np.isfinite(l["report"]["total"]) for l in lines)
    assert (tmp_path / "run" / "config.json").exists()
    assert (tmp_path / "run" / "epoch_000.pt").exists()
    back = load_generator(summary["latest"])
    assert back.cfg.channel_multiplier == 0.5


def test_train_validation_panels(toy_pools, tmp_path):
    train(_train_cfg(toy_pools, tmp_path / "run", valid_every=2, max_steps=2))
    panels = list((tmp_path / "run" / "val").rglob("*.png"))
    assert panels  # cadence 2 fires after the second step


def test_train_image_mode_no_temporal_buffer(toy_pools, tmp_path):
    before = buffer_creation_count()
    train(_train_cfg(toy_pools, tmp_path / "run", max_steps=2))
    assert buffer_creation_count() == before


def test_resume_is_bit_identical_in_float64(toy_pools, tmp_path):
    full_cfg = _train_cfg(toy_pools, tmp_path / "full", epochs=2,
                          dtype="float64")
    full = train(full_cfg)
    full_lines = [json.loads(l) for l in open(full["log"]) if l.strip()]

    part = train(_train_cfg(toy_pools, tmp_path / "part", epochs=1,
                            dtype="float64"))
    resumed = train(_train_cfg(toy_pools, tmp_path / "resumed", epochs=2,
                               dtype="float64", resume=part["latest"]))
    res_lines = [json.loads(l) for l in open(resumed["log"]) if l.strip()]

    assert [l["step"] for l in res_lines] == [3, 4, 5]
    for line in res_lines:
        twin = next(l for l in full_lines if l["step"] == line["step"])
        assert line["report"] == twin["report"]  # exact float equality

    final_full = load_generator(full["latest"]).state_dict()
    final_res = load_generator(resumed["latest"]).state_dict()
    for key, value in final_full.items():
        assert torch.equal(value, final_res[key])


def test_resume_seed_mismatch(toy_pools, tmp_path):
    part = train(_train_cfg(toy_pools, tmp_path / "a", max_steps=1))
    with pytest.raises(CheckpointMismatch):
        train(_train_cfg(toy_pools, tmp_path / "b", seed=99,
                         resume=part["latest"]))


def test_train_config_validation(toy_pools, tmp_path):
    with pytest.raises(ConfigError):
        _train_cfg(toy_pools, tmp_path, mode="audio")
    with pytest.raises(ConfigError):
        _train_cfg(toy_pools, tmp_path, dtype="float16")
    cfg = _train_cfg(toy_pools, tmp_path,
                     generator=GeneratorConfig(channel_multiplier=0.5,
                                               tfr_beta=1 / 16, sfe_knn=3,
                                               tfr_enabled=True))
    assert not cfg.generator.tfr_enabled  # image mode strips the splice
    assert cfg.discriminator.channel_multiplier == 0.5
