"""Shared fixtures: seeded generators, toy model configs and small phantom datasets."""

import numpy as np
import pytest

from src.model.config import ModelConfig
from src.pipeline.config import DataConfig, RunConfig, SamplerConfig, ScheduleConfig, TrainingConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_model_config(**overrides) -> ModelConfig:
    """Two-level network small enough for finite-difference checks on 16x16 slices."""
    settings = dict(
        base_channels=4,
        levels=2,
        res_blocks_per_level=1,
        channel_mult=(1, 2),
        sdm_channels=3,
        timestep_embed_dim=8,
        groups=2,
    )
    settings.update(overrides)
    return ModelConfig(**settings)


@pytest.fixture
def toy_config() -> ModelConfig:
    return toy_model_config()


def small_run_config(data_dir, **training) -> RunConfig:
    """Four-slice 32x32 phantoms, a toy network and a short schedule."""
    settings = dict(lr=1e-3, batch=2, iterations=2, log_every=1, checkpoint_every=1000,
                    val_every=1, val_batch=2, seed=0)
    settings.update(training)
    return RunConfig(
        schedule=ScheduleConfig(T=50),
        sampler=SamplerConfig(steps=2),
        model=toy_model_config(),
        training=TrainingConfig(**settings),
        data=DataConfig(phantom_count=5, split=(0.6, 0.2, 0.2), data_dir=str(data_dir),
                        shape=(32, 32, 8), spacing_mm=(4.0, 4.0, 4.0), oar_count=2, seed=3),
    )


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    """A generated five-case dataset shared by the pipeline tests of one module."""
    from src.pipeline.dataset import generate_dataset

    data_dir = tmp_path_factory.mktemp("phantoms")
    config = small_run_config(data_dir)
    generate_dataset(config, data_dir)
    return data_dir, config


@pytest.fixture
def make_model_config():
    return toy_model_config


@pytest.fixture
def make_run_config():
    return small_run_config
