"""Warping, flow estimation, relative warping error, testset evaluation."""

import csv
import json
import os
import stat
import sys

import numpy as np
import pytest
from scipy import ndimage

import reference as ref
from hdrtm.errors import EmptyDataset, HdrtmError, ShapeMismatch, TooFewFrames
from hdrtm.flow import (ConstantFlow, ExternalFlow, LucasKanadeFlow, read_flo,
                        warp, write_flo)
from hdrtm.imaging import LuminanceMap, extract_luminance, normalize_hdr_clip
from hdrtm.data import load_clip
from hdrtm.metrics import evaluate_testset, rwe


def _smooth(rng, side=64):
    return ndimage.gaussian_filter(rng.random((side, side)), 3.0)


# ------------------------------------------------------------------ warp


def test_warp_zero_flow_identity(rng):
    img = rng.random((12, 17))
    out = warp(img, np.zeros((12, 17, 2)))
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_warp_integer_shift(rng):
    img = rng.random((10, 10))
    flow = np.zeros((10, 10, 2))
    flow[:, :, 0] = 1.0
    out = warp(img, flow)
    np.testing.assert_allclose(out[:, :-1], img[:, 1:], atol=1e-12)


def test_warp_oracle(rng):
    img = rng.random((9, 11))
    flow = rng.standard_normal((9, 11, 2)) * 2.5
    np.testing.assert_allclose(warp(img, flow), ref.ref_warp(img, flow),
                               atol=1e-6)


def test_warp_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        warp(rng.random((8, 8)), np.zeros((8, 9, 2)))


def test_warp_luminance_map_roundtrip(rng):
    m = LuminanceMap(rng.random((8, 8)), normalized=True)
    out = warp(m, np.zeros((8, 8, 2)))
    assert isinstance(out, LuminanceMap) and out.normalized


# ------------------------------------------------------------- estimators


def test_constant_flow_stub(rng):
    field = ConstantFlow(dx=1.5, dy=-0.5)(rng.random((6, 7)), rng.random((6, 7)))
    assert field.shape == (6, 7, 2)
    assert np.all(field[:, :, 0] == 1.5) and np.all(field[:, :, 1] == -0.5)


def test_lk_identical_frames(rng):
    a = _smooth(rng)
    flow = LucasKanadeFlow()(a, a)
    assert float(np.median(np.abs(flow))) < 0.1


def test_lk_recovers_horizontal_shift(rng):
    a = _smooth(rng)
    b = np.roll(a, 3, axis=1)  # b(x) = a(x-3) so a(x) = b(x+3)
    flow = LucasKanadeFlow()(a, b)
    inner = flow[10:-10, 10:-10]
    assert float(np.median(inner[:, :, 0])) == pytest.approx(3.0, abs=0.5)
    assert abs(float(np.median(inner[:, :, 1]))) < 0.5


def test_lk_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        LucasKanadeFlow()(rng.random((8, 8)), rng.random((8, 9)))


def test_flo_roundtrip(tmp_path, rng):
    field = rng.standard_normal((5, 6, 2)).astype(np.float32)
    write_flo(tmp_path / "f.flo", field)
    back = read_flo(tmp_path / "f.flo")
    np.testing.assert_array_equal(back, field)


def test_external_flow(tmp_path, monkeypatch, rng):
    monkeypatch.setenv("HDRTM_CACHE_DIR", str(tmp_path / "cache"))
    script = tmp_path / "zero_flow.py"
    script.write_text(
        "#!" + sys.executable + "\n"
        "import sys\n"
        "import cv2\n"
        "import numpy as np\n"
        "from hdrtm.flow import write_flo\n"
        "img = cv2.imread(sys.argv[1], 0)\n"
        "write_flo(sys.argv[3], np.zeros((*img.shape, 2), np.float32))\n")
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    flow = ExternalFlow(command=str(script))(a, b)
    assert flow.shape == (8, 8, 2)
    assert np.all(flow == 0.0)
    cache = tmp_path / "cache" / "flow"
    pngs = sorted(p.name for p in cache.glob("*.png"))
    ExternalFlow(command=str(script))(a, b)  # cached frames are reused
    assert sorted(p.name for p in cache.glob("*.png")) == pngs


def test_external_flow_failure(tmp_path, monkeypatch, rng):
    monkeypatch.setenv("HDRTM_CACHE_DIR", str(tmp_path / "cache"))
    script = tmp_path / "boom.sh"
    script.write_text("#!/bin/sh\nexit 3\n")
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    with pytest.raises(HdrtmError):
        ExternalFlow(command=str(script))(rng.random((8, 8)), rng.random((8, 8)))


# ------------------------------------------------------------------- RWE


def test_rwe_static_clip():
    frame = np.full((8, 8), 0.4)
    clip = np.stack([frame] * 4)
    assert rwe(clip, ConstantFlow()) == pytest.approx(0.0, abs=1e-6)


def test_rwe_static_clip_with_lk(rng):
    frame = _smooth(rng, 32)
    clip = np.stack([frame] * 3)
    assert rwe(clip) == pytest.approx(0.0, abs=1e-4)


def test_rwe_doubled_frame():
    a = np.random.default_rng(0).random((8, 8)) * 0.8 + 0.1
    clip = np.stack([a, 2.0 * a])
    assert rwe(clip, ConstantFlow()) == pytest.approx(2.0 / 3.0, abs=1e-5)


def test_rwe_constant_frames():
    a, b = 0.2, 0.7
    clip = np.stack([np.full((8, 8), a), np.full((8, 8), b)])
    assert rwe(clip, ConstantFlow()) == pytest.approx(
        2 * abs(a - b) / (a + b), abs=1e-5)


def test_rwe_scale_invariance(rng):
    clip = rng.random((3, 8, 8)) * 0.8 + 0.1
    base = rwe(clip, ConstantFlow())
    assert rwe(5.0 * clip, ConstantFlow()) == pytest.approx(base, abs=1e-4)


def test_rwe_oracle(rng):
    clip = rng.random((4, 9, 9)) * 0.8 + 0.1
    flows = [rng.standard_normal((9, 9, 2)) * 0.5 for _ in range(3)]
    order = iter(flows)

    def scripted(prev, cur):
        return next(order)

    assert rwe(clip, scripted) == pytest.approx(
        ref.ref_rwe(clip, flows), abs=1e-9)


def test_rwe_too_few_frames():
    with pytest.raises(TooFewFrames):
        rwe(np.zeros((1, 8, 8)), ConstantFlow())


# -------------------------------------------------------------- testset


def _identity_model(stack):
    return stack


def test_evaluate_testset_schema(toy_videos, tmp_path):
    report = evaluate_testset(toy_videos, _identity_model,
                              flow_estimator=ConstantFlow(),
                              out_dir=tmp_path)
    assert len(report["videos"]) == 2
    for key in ("tmqi", "tmqi_s", "tmqi_n", "rwe", "video", "frames"):
        assert key in report["videos"][0]
    for key in ("tmqi", "rwe"):
        want = float(np.mean([r[key] for r in report["videos"]]))
        assert report["mean"][key] == pytest.approx(want, abs=1e-9)
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["videos"][0]["video"] == report["videos"][0]["video"]
    with open(tmp_path / "report.csv", newline="") as fh:
        lines = list(csv.reader(fh))
    assert len(lines) == 1 + 2 + 1  # header, two videos, mean row
    assert lines[-1][0] == "mean"


def test_evaluate_testset_identity_rwe_matches_direct(toy_videos):
    report = evaluate_testset(toy_videos, _identity_model,
                              flow_estimator=ConstantFlow())
    clip_dir = sorted(p for p in toy_videos.iterdir() if p.is_dir())[0]
    clip = load_clip(clip_dir)
    raw = [extract_luminance(f) for f in clip.frames[:6]]
    norm = normalize_hdr_clip(raw)
    stack = np.stack([m.values for m in norm])
    direct = rwe(stack, ConstantFlow())
    row = [r for r in report["videos"] if r["video"] == clip_dir.name][0]
    assert row["rwe"] == pytest.approx(direct, abs=1e-9)


def test_evaluate_testset_frames_cap(toy_videos):
    report = evaluate_testset(toy_videos, _identity_model,
                              flow_estimator=ConstantFlow(),
                              frames_per_video=3)
    assert all(r["frames"] == 3 for r in report["videos"])


def test_evaluate_testset_empty(tmp_path):
    os.makedirs(tmp_path / "nothing", exist_ok=True)
    with pytest.raises(EmptyDataset):
        evaluate_testset(tmp_path / "nothing", _identity_model)
