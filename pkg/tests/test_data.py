"""Manifests, synthetic clip generation, deterministic batch assembly."""

import numpy as np
import pytest
from scipy import stats as sstats

from hdrtm.data import (BatchSampler, DatasetManifest, ManifestEntry,
                        SampleConfig, SyntheticClipSpec, TrainingBatch,
                        build_manifest, draw_gamma, synth_clip_from_image)
from hdrtm.errors import (ConfigError, DuplicatePathWarning, EmptyPool,
                          InsufficientFrames, SourceTooSmall)
from hdrtm.imaging import RadianceImage


# --------------------------------------------------------------- manifest


def test_build_counts_and_kinds(toy_manifest):
    for kind in ("hdr", "ldr_good", "ldr_poor"):
        pool = toy_manifest.by_kind(kind)
        assert len(pool) == 8
        assert all(e.media == "image" for e in pool)
        assert all(e.height == e.width == 64 for e in pool)


def test_build_lexicographic(toy_manifest):
    for kind in ("hdr", "ldr_good", "ldr_poor"):
        paths = [e.path for e in toy_manifest.by_kind(kind)]
        assert paths == sorted(paths)


def test_rebuild_byte_identical(toy_pools, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    build_manifest(toy_pools).save(a)
    build_manifest(toy_pools).save(b)
    assert a.read_bytes() == b.read_bytes()


def test_save_load_roundtrip(toy_manifest, tmp_path):
    path = tmp_path / "m.json"
    toy_manifest.save(path)
    back = DatasetManifest.load(path)
    assert back.entries == toy_manifest.entries
    assert back.seed == toy_manifest.seed


def test_duplicate_paths_warn(toy_pools):
    doubled = dict(toy_pools)
    doubled["hdr"] = [toy_pools["hdr"], toy_pools["hdr"]]
    with pytest.warns(DuplicatePathWarning):
        manifest = build_manifest(doubled)
    assert len(manifest.by_kind("hdr")) == 8


def test_empty_pool_named(tmp_path, toy_pools):
    (tmp_path / "void").mkdir()
    roots = dict(toy_pools)
    roots["ldr_poor"] = tmp_path / "void"
    with pytest.raises(EmptyPool, match="ldr_poor"):
        build_manifest(roots)


def test_unknown_kind(toy_pools):
    with pytest.raises(ConfigError):
        build_manifest({"mystery": toy_pools["hdr"]})


def test_require_kinds(toy_pools):
    manifest = build_manifest({"hdr": toy_pools["hdr"]})
    with pytest.raises(EmptyPool):
        manifest.require_kinds()


def test_entry_validation():
    with pytest.raises(ConfigError):
        ManifestEntry(path="x", kind="bogus", media="image", height=1, width=1)


# -------------------------------------------------------------- synthesis


def _toy_image(rng, h=64, w=64):
    return RadianceImage((rng.random((h, w, 3)) * 5 + 0.01).astype(np.float32))


def test_synth_gamma1_exact_size_repeats(rng):
    img = _toy_image(rng)
    clip = synth_clip_from_image(img, SyntheticClipSpec(
        gamma=1.0, frames=4, crop=64, seed=0))
    assert len(clip.frames) == 4
    assert isinstance(clip.frames[0], RadianceImage)
    for f in clip.frames[1:]:
        np.testing.assert_array_equal(f.pixels, clip.frames[0].pixels)


def test_synth_single_frame(rng):
    clip = synth_clip_from_image(_toy_image(rng), SyntheticClipSpec(
        gamma=1.0, frames=1, crop=32, seed=1))
    assert len(clip.frames) == 1
    assert clip.frames[0].pixels.shape == (32, 32, 3)


def test_synth_deterministic(rng):
    img = _toy_image(rng, 96, 96)
    spec = SyntheticClipSpec(gamma=1.2, frames=3, crop=48, seed=17)
    a = synth_clip_from_image(img, spec)
    b = synth_clip_from_image(img, spec)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.pixels, fb.pixels)
    c = synth_clip_from_image(img, SyntheticClipSpec(
        gamma=1.2, frames=3, crop=48, seed=18))
    assert any(not np.array_equal(fa.pixels, fc.pixels)
               for fa, fc in zip(a.frames, c.frames))


def test_synth_offset_trace(rng):
    arr = rng.random((32, 48, 3)).astype(np.float32)
    clip = synth_clip_from_image(arr, SyntheticClipSpec(
        gamma=1.0, frames=3, crop=16, seed=9))
    trace = np.random.Generator(np.random.PCG64(9))
    for frame in clip.frames:
        y0 = int(trace.integers(0, 32 - 16 + 1))
        x0 = int(trace.integers(0, 48 - 16 + 1))
        np.testing.assert_array_equal(frame, arr[y0:y0 + 16, x0:x0 + 16])


def test_synth_source_too_small(rng):
    with pytest.raises(SourceTooSmall):
        synth_clip_from_image(_toy_image(rng, 64, 64), SyntheticClipSpec(
            gamma=2.8, frames=1, crop=64, seed=0))


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticClipSpec(gamma=0.5, frames=1)
    with pytest.raises(ConfigError):
        SyntheticClipSpec(gamma=3.0, frames=1)
    with pytest.raises(ConfigError):
        SyntheticClipSpec(gamma=1.5, frames=0)


def test_gamma_draw_uniform():
    rng = np.random.default_rng(123)
    draws = [draw_gamma(rng) for _ in range(2000)]
    res = sstats.kstest(draws, sstats.uniform(loc=1.0, scale=1.8).cdf)
    assert res.statistic < 0.05
    assert 1.0 <= min(draws) and max(draws) <= 2.8


# ---------------------------------------------------------------- sampler


def _cfg(**kw):
    base = dict(batch=3, negatives=4, clip_len=2, crop=64)
    base.update(kw)
    return SampleConfig(**base)


def test_batch_shapes(toy_manifest):
    batch = BatchSampler(toy_manifest, _cfg(), seed=0).sample(0)
    assert batch.hdr_norm.shape == (3, 2, 64, 64)
    assert batch.hdr_raw.shape == (3, 2, 64, 64)
    assert batch.ldr_good.shape == (3, 2, 64, 64)
    assert batch.ldr_poor.shape == (4, 2, 64, 64)
    assert 0.0 <= batch.hdr_norm.min() and batch.hdr_norm.max() <= 1.0
    assert batch.hdr_raw.min() >= 0.0


def test_image_mode_forces_t1(toy_manifest):
    batch = BatchSampler(toy_manifest, _cfg(mode="image"), seed=0).sample(0)
    assert batch.hdr_norm.shape == (3, 1, 64, 64)
    assert batch.ldr_poor.shape == (4, 1, 64, 64)


def test_same_seed_same_batch(toy_manifest):
    a = BatchSampler(toy_manifest, _cfg(), seed=7).sample(3)
    b = BatchSampler(toy_manifest, _cfg(), seed=7).sample(3)
    for field in ("hdr_norm", "hdr_raw", "ldr_good", "ldr_poor"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    assert a.hdr_sources == b.hdr_sources
    assert a.poor_sources == b.poor_sources


def test_different_seed_differs(toy_manifest):
    a = BatchSampler(toy_manifest, _cfg(), seed=7).sample(0)
    b = BatchSampler(toy_manifest, _cfg(), seed=8).sample(0)
    assert (a.hdr_sources != b.hdr_sources
            or not np.array_equal(a.hdr_norm, b.hdr_norm))


def test_step_is_pure_index(toy_manifest):
    warm = BatchSampler(toy_manifest, _cfg(), seed=5)
    for s in range(5):
        warm.sample(s)
    cold = BatchSampler(toy_manifest, _cfg(), seed=5)
    a, b = warm.sample(5), cold.sample(5)
    np.testing.assert_array_equal(a.hdr_norm, b.hdr_norm)
    np.testing.assert_array_equal(a.ldr_poor, b.ldr_poor)


def test_unpaired_sources(toy_manifest):
    batch = BatchSampler(toy_manifest, _cfg(), seed=0).sample(0)
    h, g, p = (set(batch.hdr_sources), set(batch.good_sources),
               set(batch.poor_sources))
    assert not (h & g) and not (h & p) and not (g & p)


def test_steps_per_epoch_and_coverage(toy_manifest):
    sampler = BatchSampler(toy_manifest, _cfg(), seed=1)
    assert sampler.steps_per_epoch() == 3  # ceil(8 / 3)
    seen = set()
    for s in range(3):
        seen.update(sampler.sample(s).hdr_sources)
    assert len(seen) == 8  # one epoch visits every HDR source


def test_batch_disjointness_guard():
    z = np.zeros((1, 1, 4, 4), np.float32)
    with pytest.raises(ValueError):
        TrainingBatch(hdr_norm=z, hdr_raw=z, ldr_good=z, ldr_poor=z,
                      hdr_sources=["a"], good_sources=["a"],
                      poor_sources=["b"])


def test_video_pool_and_insufficient_frames(toy_videos, toy_pools):
    roots = {"hdr": toy_videos, "ldr_good": toy_pools["ldr_good"],
             "ldr_poor": toy_pools["ldr_poor"]}
    manifest = build_manifest(roots)
    vids = manifest.by_kind("hdr")
    assert all(e.media == "video" and e.frames == 6 for e in vids)
    sampler = BatchSampler(manifest, _cfg(batch=2, crop=32, clip_len=3), seed=0)
    batch = sampler.sample(0)
    assert batch.hdr_norm.shape == (2, 3, 32, 32)
    too_long = BatchSampler(manifest, _cfg(batch=2, crop=32, clip_len=7), seed=0)
    with pytest.raises(InsufficientFrames):
        too_long.sample(0)


def test_sample_config_validation():
    with pytest.raises(ConfigError):
        SampleConfig(mode="audio")
    with pytest.raises(ConfigError):
        SampleConfig(batch=0)
    assert SampleConfig(mode="image", clip_len=5).effective_clip_len == 1
