from __future__ import annotations

import numpy as np
import pytest

from config import NetworkConfig, PhantomConfig, PipelineConfig, tiny_network


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net() -> NetworkConfig:
    return tiny_network()


@pytest.fixture
def small_phantom_cfg() -> PhantomConfig:
    return PhantomConfig(
        dims=(32, 32, 32),
        fiber_count=4,
        length_range_vox=(12.0, 24.0),
        noise_sigma=0.05,
        seed=7,
    )


@pytest.fixture
def small_pipeline_cfg() -> PipelineConfig:
    """16^3 tiles with overlap 8 on a 32^3 phantom; small network and short training."""
    return PipelineConfig.model_validate(
        {
            "tiles": {"tile_size": 16, "overlap": 8},
            "phantom": {"dims": [32, 32, 32], "fiber_count": 4, "length_range_vox": [12.0, 24.0], "seed": 7},
            "network": {"trunk_channels": 4, "blocks_per_branch": 1, "embedding_dims": 4, "tile_size": 16},
            "train": {
                "tile_size": 16, "batch_size": 2, "iterations_semantic": 3, "iterations_embedding": 3,
                "log_every": 1, "seed": 7, "adam": {"lr": 0.01},
            },
            "seed": 7,
            "threads": 1,
        }
    )
