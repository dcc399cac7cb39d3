import os
import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def toy_pools(tmp_path_factory):
    """Small still-image pools shared by data/training/cli tests."""
    from hdrtm.toy import make_toy_pools
    root = tmp_path_factory.mktemp("pools")
    return make_toy_pools(root, n_hdr=8, n_good=8, n_poor=8, size=64, seed=11)


@pytest.fixture(scope="session")
def toy_manifest(toy_pools):
    from hdrtm.data import build_manifest
    return build_manifest(toy_pools, seed=0)


@pytest.fixture(scope="session")
def toy_videos(tmp_path_factory):
    from hdrtm.toy import make_toy_hdr_videos
    root = tmp_path_factory.mktemp("videos")
    make_toy_hdr_videos(root, count=2, frames=6, size=64, seed=3)
    return root


@pytest.fixture(scope="session")
def small_gen_cfg():
    from hdrtm.model import GeneratorConfig
    return GeneratorConfig(channel_multiplier=0.5, tfr_beta=1 / 16)


@pytest.fixture(scope="session")
def trained_toy_checkpoint(tmp_path_factory, toy_pools):
    """A briefly trained image-mode model reused by inference-level tests."""
    from hdrtm.model import GeneratorConfig
    from hdrtm.training import TrainConfig, fixed_schedule, train
    out = tmp_path_factory.mktemp("ckpt")
    cfg = TrainConfig(
        roots=toy_pools, out_dir=str(out), mode="image", epochs=10,
        batch=3, negatives=4, crop=64, seed=5,
        generator=GeneratorConfig(channel_multiplier=0.5, tfr_beta=1 / 16),
        schedule=fixed_schedule(lr_g=1e-4, lr_d=1.5e-4),
        valid_every=0, max_steps=12)
    train(cfg)
    return os.path.join(str(out), "latest.pt")
