"""
config.py — every tunable of the pipeline in one place.

What it does:
- Process-level defaults read from the environment (FIBERSEG_*).
- pydantic models per module; field constraints are the module preconditions,
  so a bad JSON document fails at load time instead of mid-run.
- config_hash() fingerprints a config for reports and checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

# ============================================================================
# ENVIRONMENT DEFAULTS
# ============================================================================
OUT_DIR = os.getenv("FIBERSEG_OUT_DIR", "runs")
THREADS = int(os.getenv("FIBERSEG_THREADS", "1"))
SEED = int(os.getenv("FIBERSEG_SEED", "42"))


# ============================================================================
# MODULE SETTINGS
# ============================================================================
class TileSettings(BaseModel):
    tile_size: int = Field(32, ge=1)
    overlap: int = Field(16, ge=0)
    voxel_size_um: float = Field(3.9, gt=0)

    @model_validator(mode="after")
    def _overlap_below_tile(self) -> "TileSettings":
        if self.overlap >= self.tile_size:
            raise ValueError(f"overlap ({self.overlap}) must be smaller than tile_size ({self.tile_size})")
        return self

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap


class PhantomConfig(BaseModel):
    dims: Tuple[int, int, int] = (64, 64, 64)
    fiber_count: int = Field(25, ge=1)
    radius_range_vox: Tuple[float, float] = (1.0, 1.5)
    length_range_vox: Tuple[float, float] = (20.0, 48.0)
    orientation_cone_deg: float = Field(25.0, ge=0, le=90)
    principal_axis: Literal["z", "y", "x"] = "x"
    noise_sigma: float = Field(0.1, ge=0)
    blur_sigma_vox: float = Field(0.7, ge=0)
    min_clearance_vox: float = Field(1.0, ge=0)
    max_retries: int = Field(200, ge=1)
    seed: int = SEED

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(d <= 0 for d in v):
            raise ValueError(f"dims must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _ranges(self) -> "PhantomConfig":
        lo, hi = self.radius_range_vox
        if not (0 < lo <= hi < min(self.dims) / 4):
            raise ValueError(f"radius_range_vox {self.radius_range_vox} must lie in (0, {min(self.dims) / 4})")
        llo, lhi = self.length_range_vox
        if not (0 <= llo <= lhi):
            raise ValueError(f"length_range_vox {self.length_range_vox} is not an ordered non-negative range")
        return self


class NetworkConfig(BaseModel):
    in_channels: int = Field(1, ge=1)
    trunk_channels: int = Field(16, ge=1)
    blocks_per_branch: int = Field(3, ge=1)
    embedding_dims: int = Field(16, ge=2)
    semantic_out: Literal[2] = 2
    tile_size: int = Field(32, ge=1)
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_eps: float = Field(1e-5, gt=0)


class EmbeddingLossParams(BaseModel):
    delta_v: float = Field(0.5, ge=0)
    delta_d: float = Field(1.5, gt=0)
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    gamma: float = Field(0.001, ge=0)


class AdamSettings(BaseModel):
    lr: float = Field(0.001, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainConfig(BaseModel):
    iterations_semantic: int = Field(2000, ge=1)
    iterations_embedding: int = Field(2000, ge=1)
    batch_size: int = Field(4, ge=1)
    tile_size: int = Field(32, ge=1)
    seed: int = SEED
    log_every: int = Field(100, ge=1)
    augment: bool = True
    loss: EmbeddingLossParams = Field(default_factory=EmbeddingLossParams)
    adam: AdamSettings = Field(default_factory=AdamSettings)


class DbscanParams(BaseModel):
    eps: float = Field(0.5, gt=0)
    min_pts: int = Field(8, ge=1)


class PredictSettings(BaseModel):
    semantic_threshold: float = Field(0.5, ge=0, le=1)
    air_threshold: Optional[float] = None
    on_unsegmentable: Literal["error", "background"] = "error"


class MergeParams(BaseModel):
    threshold: int = Field(3, ge=1)


class BaselineSettings(BaseModel):
    erosion_radius: int = Field(1, ge=1)
    erosion_connectivity: Literal[6, 26] = 26
    cc_connectivity: Literal[6, 26] = 26


class PipelineConfig(BaseModel):
    tiles: TileSettings = Field(default_factory=TileSettings)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    dbscan: DbscanParams = Field(default_factory=DbscanParams)
    predict: PredictSettings = Field(default_factory=PredictSettings)
    merge: MergeParams = Field(default_factory=MergeParams)
    baseline: BaselineSettings = Field(default_factory=BaselineSettings)
    seed: int = SEED
    threads: int = Field(THREADS, ge=1)

    @model_validator(mode="after")
    def _consistent_tiles(self) -> "PipelineConfig":
        t = self.tiles.tile_size
        if self.network.tile_size != t or self.train.tile_size != t:
            raise ValueError(
                f"tile sizes disagree: tiles={t}, network={self.network.tile_size}, train={self.train.tile_size}"
            )
        if any(d < t for d in self.phantom.dims):
            raise ValueError(f"phantom dims {self.phantom.dims} smaller than tile_size {t}")
        return self


# ============================================================================
# LOAD / SAVE / HASH
# ============================================================================
def load_config(path: Optional[str | Path] = None) -> PipelineConfig:
    """Read a PipelineConfig from JSON; None gives the defaults."""
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        return PipelineConfig.model_validate_json(p.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"invalid config {p}:\n{e}") from e


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")


def config_hash(cfg: BaseModel) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def with_overrides(cfg: PipelineConfig, seed: Optional[int] = None, threads: Optional[int] = None) -> PipelineConfig:
    """Apply CLI --seed/--threads on top of a loaded config (seed fans out to phantom and train)."""
    data = cfg.model_dump()
    if seed is not None:
        data["seed"] = seed
        data["phantom"]["seed"] = seed
        data["train"]["seed"] = seed
    if threads is not None:
        data["threads"] = threads
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def tiny_network(tile_size: int = 8, trunk_channels: int = 4, blocks: int = 1, embedding_dims: int = 4) -> NetworkConfig:
    """Small network used by the gradient suite and quick tests."""
    return NetworkConfig(
        trunk_channels=trunk_channels,
        blocks_per_branch=blocks,
        embedding_dims=embedding_dims,
        tile_size=tile_size,
    )


def benchmark_config() -> PipelineConfig:
    """64^3 / 25-fiber phantom benchmark sized to train 2000 + 2000 iterations in under 30 min on 4 cores.

    Trunk width 8 with 2 blocks per branch and batch 2; everything else stays at the defaults.
    Mirrors configs/benchmark.json.
    """
    return PipelineConfig(
        network=NetworkConfig(trunk_channels=8, blocks_per_branch=2),
        train=TrainConfig(batch_size=2, iterations_semantic=2000, iterations_embedding=2000),
    )


__all__: List[str] = [
    "OUT_DIR", "THREADS", "SEED",
    "TileSettings", "PhantomConfig", "NetworkConfig", "EmbeddingLossParams", "AdamSettings",
    "TrainConfig", "DbscanParams", "PredictSettings", "MergeParams", "BaselineSettings",
    "PipelineConfig", "load_config", "save_config", "config_hash", "with_overrides", "tiny_network", "benchmark_config",
]
