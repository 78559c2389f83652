"""Shared fixtures: a tiny run configuration and matching datasets."""

import pytest

from dsva.config import RunConfig
from dsva.synthdata import GenerationConfig, build_dataset

TINY_LATENT = 4


def tiny_config(output_dir, phase="pretrain_text", **train):
    """A configuration small enough for a few CPU steps."""
    config = RunConfig()
    config.run.output_dir = str(output_dir)
    config.run.phase = phase
    config.run.progress = False
    config.data.image_size = 32
    config.data.latent_dim = TINY_LATENT
    config.model.hidden_dim = 8
    config.model.embed_dim = 8
    config.model.points = 2
    config.model.blocks = 1
    config.model.disc_hidden = 8
    config.model.q_hidden = 8
    config.train.batch_size = 4
    config.train.phase1_steps = 3
    config.train.phase2_steps = 3
    config.train.eval_interval = 0
    config.eval.batch_size = 4
    for key, value in train.items():
        setattr(config.train, key, value)
    return config.validate()


@pytest.fixture(scope="session")
def tiny_data():
    """(train, held_out) 32px datasets with D=4."""
    spec = GenerationConfig(image_size=32)
    train = build_dataset(0, 12, spec, latent_dim=TINY_LATENT)
    held_out = build_dataset(10_000, 6, spec, latent_dim=TINY_LATENT)
    return train, held_out


@pytest.fixture
def config(tmp_path):
    return tiny_config(tmp_path / "run")
