from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from config import AdamSettings, NetworkConfig, TrainConfig
from errors import CheckpointMismatchError
from network import init_network, save_checkpoint, state_checksum
from train import (
    LOG_COLUMNS,
    sample_corner,
    sample_training_tile,
    train_embedding,
    train_semantic,
    transfer_semantic_weights,
    write_train_log,
)


def _rods(n: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Two parallel rods along x with a little noise."""
    gt = np.zeros((n, n, n), dtype=np.uint32)
    gt[1:3, 1:3, :] = 1
    gt[5:7, 5:7, :] = 2
    rng = np.random.default_rng(0)
    raw = (gt > 0).astype(np.float64) + rng.normal(0.0, 0.05, size=gt.shape)
    return (raw - raw.mean()) / raw.std(), gt


def _cfg(**kw) -> TrainConfig:
    base = dict(
        tile_size=8, batch_size=2, iterations_semantic=25, iterations_embedding=10,
        log_every=5, seed=0, augment=False, adam=AdamSettings(lr=0.01),
    )
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
def test_sampler_is_deterministic_per_seed() -> None:
    raw, gt = _rods(16)
    a = sample_training_tile(raw, gt, np.random.default_rng(3), tile_size=8)
    b = sample_training_tile(raw, gt, np.random.default_rng(3), tile_size=8)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_tile_equal_to_volume_returns_the_volume() -> None:
    raw, gt = _rods(8)
    r, g, m = sample_training_tile(raw, gt, np.random.default_rng(0), tile_size=8, do_augment=False)
    assert np.array_equal(r, raw)
    assert np.array_equal(g, gt)
    assert np.array_equal(m, (gt > 0).astype(np.uint8))


def test_augmented_tile_keeps_labels_aligned() -> None:
    raw, gt = _rods(16)
    _, g, m = sample_training_tile(raw, gt, np.random.default_rng(5), tile_size=8)
    assert np.array_equal(m, (g > 0).astype(np.uint8))


def test_corners_are_uniform_per_axis() -> None:
    rng = np.random.default_rng(2024)
    corners = np.array([sample_corner((64, 64, 64), 32, rng) for _ in range(10_000)])
    assert corners.min() == 0 and corners.max() == 32
    for axis in range(3):
        counts = np.bincount(corners[:, axis], minlength=33)
        # 1% family level over the three axes
        assert stats.chisquare(counts).pvalue > 0.01 / 3


def test_training_tile_is_cropped_at_sampled_corner() -> None:
    raw, gt = _rods(16)
    origin = sample_corner(raw.shape, 8, np.random.default_rng(9))
    r, g, _ = sample_training_tile(raw, gt, np.random.default_rng(9), tile_size=8, do_augment=False)
    z, y, x = origin
    assert np.array_equal(r, raw[z:z + 8, y:y + 8, x:x + 8])
    assert np.array_equal(g, gt[z:z + 8, y:y + 8, x:x + 8])


def test_volume_smaller_than_tile_raises() -> None:
    raw, gt = _rods(8)
    with pytest.raises(ValueError):
        sample_training_tile(raw, gt, np.random.default_rng(0), tile_size=16)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------
def test_semantic_training_lowers_loss(tiny_net: NetworkConfig) -> None:
    raw, gt = _rods()
    run = train_semantic(raw, gt > 0, _cfg(), tiny_net, verbose=False)
    assert list(run.history.columns) == LOG_COLUMNS
    assert len(run.history) == 25
    assert run.history["loss"].iloc[-1] < run.history["loss"].iloc[0]
    assert run.state.stage == "semantic"
    assert run.state.mode == "eval"


def test_same_seed_gives_identical_weights(tiny_net: NetworkConfig) -> None:
    raw, gt = _rods()
    a = train_semantic(raw, gt > 0, _cfg(), tiny_net, iterations=3, verbose=False)
    b = train_semantic(raw, gt > 0, _cfg(), tiny_net, iterations=3, verbose=False)
    assert state_checksum(a.state) == state_checksum(b.state)


def test_semantic_from_embedding_checkpoint_raises(tiny_net: NetworkConfig) -> None:
    raw, gt = _rods()
    state = init_network(tiny_net)
    state.stage = "embedding"
    with pytest.raises(CheckpointMismatchError):
        train_semantic(raw, gt > 0, _cfg(), state=state, iterations=1, verbose=False)


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------
def test_transfer_copies_trunk_and_reinitializes_head(tiny_net: NetworkConfig) -> None:
    state = init_network(tiny_net, seed=1)
    out = transfer_semantic_weights(state, seed=2)
    assert np.array_equal(out.params["embedding.conv_in.w"], state.params["semantic.conv_in.w"])
    assert np.array_equal(out.params["embedding.block0.conv2.w"], state.params["semantic.block0.conv2.w"])
    assert np.array_equal(out.buffers["embedding.bn_in.running_var"], state.buffers["semantic.bn_in.running_var"])
    assert out.params["embedding.conv_out.w"].shape == (tiny_net.embedding_dims, tiny_net.trunk_channels, 1, 1, 1)
    assert np.all(out.params["embedding.conv_out.b"] == 0)


def test_embedding_stage_freezes_semantic_branch(tiny_net: NetworkConfig) -> None:
    raw, gt = _rods()
    sem = train_semantic(raw, gt > 0, _cfg(), tiny_net, iterations=3, verbose=False)
    emb = train_embedding(sem.state, raw, gt, _cfg(), verbose=False)
    assert emb.state.stage == "embedding"
    assert state_checksum(emb.state, "semantic") == state_checksum(sem.state, "semantic")
    assert state_checksum(emb.state, "embedding") != state_checksum(sem.state, "embedding")
    hist = emb.history
    assert len(hist) == 10
    assert (hist["stage"] == "embedding").all()
    assert np.isfinite(hist[["loss", "l_v", "l_d", "l_r"]].to_numpy()).all()


def test_embedding_training_lowers_loss(tiny_net: NetworkConfig) -> None:
    raw, gt = _rods()
    sem = train_semantic(raw, gt > 0, _cfg(), tiny_net, iterations=3, verbose=False)
    run = train_embedding(sem.state, raw, gt, _cfg(), iterations=40, verbose=False)
    loss = run.history["loss"].to_numpy()
    assert len(loss) == 40
    assert loss[-4:].mean() < loss[:4].mean()


def test_embedding_same_seed_gives_identical_checkpoints(tmp_path: Path, tiny_net: NetworkConfig) -> None:
    raw, gt = _rods()
    sem = train_semantic(raw, gt > 0, _cfg(), tiny_net, iterations=2, verbose=False)
    paths = []
    for name in ("a", "b"):
        run = train_embedding(sem.state, raw, gt, _cfg(augment=True), iterations=4, verbose=False)
        paths.append(save_checkpoint(run.state, tmp_path / f"{name}.ckpt"))
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_embedding_from_fresh_state_raises(tiny_net: NetworkConfig) -> None:
    raw, gt = _rods()
    with pytest.raises(CheckpointMismatchError, match="semantic-stage"):
        train_embedding(init_network(tiny_net), raw, gt, _cfg(), iterations=1, verbose=False)


def test_batches_without_foreground_are_skipped(tiny_net: NetworkConfig) -> None:
    raw, gt = _rods()
    sem = train_semantic(raw, gt > 0, _cfg(), tiny_net, iterations=1, verbose=False)
    run = train_embedding(sem.state, raw, np.zeros_like(gt), _cfg(), iterations=4, verbose=False)
    assert run.history.empty


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------
def test_train_log_keeps_every_nth_and_last(tmp_path: Path) -> None:
    history = pd.DataFrame(
        [{"stage": "semantic", "iteration": i, "loss": 1.0 / i, "l_v": np.nan, "l_d": np.nan, "l_r": np.nan, "elapsed_s": 0.1 * i}
         for i in range(1, 6)],
        columns=LOG_COLUMNS,
    )
    path = write_train_log(history, tmp_path / "log.csv", log_every=2)
    back = pd.read_csv(path)
    assert back["iteration"].tolist() == [2, 4, 5]
    assert list(back.columns) == LOG_COLUMNS
