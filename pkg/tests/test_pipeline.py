from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import pipeline
from baseline import baseline_pipeline
from config import PipelineConfig, PredictSettings
from errors import CheckpointMismatchError, UnsegmentableTileError
from metrics import adjusted_rand_index
from network import init_network, load_checkpoint, save_checkpoint
from pipeline import (
    SETUPS,
    TilePrediction,
    infer_tiles,
    plan_for,
    run_compare,
    run_predict,
    segment_with_embeddings,
    stitch_semantic,
)
from volume import LabelVolume, ScalarVolume, crop, save_volume


def _rod_volume() -> np.ndarray:
    gt = np.zeros((32, 32, 32), dtype=np.uint32)
    gt[2:5, 2:5, :] = 1
    gt[10:13, 20:23, :] = 2
    gt[25:28, 8:11, :] = 3
    gt[:, 28:31, 16:19] = 4
    return gt


def _ideal_preds(gt: np.ndarray, cfg: PipelineConfig, dims: int = 4):
    """Foreground = gt mask, every instance embedded at its own well-separated point."""
    emb = np.zeros((dims,) + gt.shape)
    emb[0] = 3.0 * gt
    fg = (gt > 0).astype(np.float64)
    plan = plan_for(gt.shape, cfg)
    return [
        TilePrediction(origin=o, fg_prob=crop(fg, o, plan.tile_size), embedding=crop(emb, o, plan.tile_size))
        for o in plan.origins
    ], plan


def _with_policy(cfg: PipelineConfig, policy: str) -> PipelineConfig:
    return cfg.model_copy(update={"predict": PredictSettings(on_unsegmentable=policy)})


def _embedding_state(cfg: PipelineConfig):
    state = init_network(cfg.network, seed=0)
    state.stage = "embedding"
    return state


def test_stitch_semantic_averages_overlaps(small_pipeline_cfg: PipelineConfig) -> None:
    plan = plan_for((32, 32, 32), small_pipeline_cfg)
    preds = [
        TilePrediction(o, np.full((16, 16, 16), float(i % 2)), np.zeros((4, 16, 16, 16)))
        for i, o in enumerate(plan.origins)
    ]
    stitched = stitch_semantic(preds, plan)
    cover = plan.coverage()
    assert stitched[0, 0, 0] == 0.0
    assert np.all((stitched >= 0) & (stitched <= 1))
    assert stitched[0, 0, 12] == pytest.approx(0.5)
    assert cover[0, 0, 12] == 2


def test_infer_tiles_is_thread_invariant(small_pipeline_cfg: PipelineConfig) -> None:
    cfg = small_pipeline_cfg
    raw = np.random.default_rng(0).normal(size=(32, 32, 32))
    state = init_network(cfg.network, seed=0)
    plan = plan_for(raw.shape, cfg)
    one = infer_tiles(state, raw, plan, threads=1)
    many = infer_tiles(state, raw, plan, threads=3)
    assert [p.origin for p in one] == list(plan.origins)
    for a, b in zip(one, many):
        assert np.array_equal(a.fg_prob, b.fg_prob)
        assert np.array_equal(a.embedding, b.embedding)


def test_ideal_embeddings_segment_perfectly(tmp_path: Path, small_pipeline_cfg: PipelineConfig) -> None:
    gt = _rod_volume()
    preds, plan = _ideal_preds(gt, small_pipeline_cfg)
    tiles, merged, bad = segment_with_embeddings(preds, plan, small_pipeline_cfg, dump_dir=tmp_path / "emb")
    assert bad == []
    assert len(tiles) == len(plan.origins)
    assert adjusted_rand_index(gt, merged.labels) == pytest.approx(1.0)
    assert merged.n_instances == 4
    assert len(list((tmp_path / "emb").glob("*.csv"))) == len(plan.origins)


def test_scattered_embeddings_follow_unsegmentable_policy(small_pipeline_cfg: PipelineConfig) -> None:
    gt = _rod_volume()
    preds, plan = _ideal_preds(gt, small_pipeline_cfg)
    rng = np.random.default_rng(0)
    for p in preds:
        p.embedding = rng.uniform(0.0, 1000.0, size=p.embedding.shape)
    with pytest.raises(UnsegmentableTileError):
        segment_with_embeddings(preds, plan, _with_policy(small_pipeline_cfg, "error"))
    _, merged, bad = segment_with_embeddings(preds, plan, _with_policy(small_pipeline_cfg, "background"))
    with_fg = [p.origin for p in preds if (p.fg_prob > 0.5).any()]
    assert bad == with_fg
    assert not merged.labels.any()


def test_air_mask_removes_foreground(small_pipeline_cfg: PipelineConfig) -> None:
    gt = _rod_volume()
    preds, plan = _ideal_preds(gt, small_pipeline_cfg)
    air = gt != 4
    _, merged, _ = segment_with_embeddings(preds, plan, small_pipeline_cfg, air_mask=air)
    assert not merged.labels[gt == 4].any()
    assert merged.n_instances == 3


def test_baseline_with_true_semantics_needs_no_weights(small_pipeline_cfg: PipelineConfig) -> None:
    gt = _rod_volume()
    raw = ScalarVolume((gt > 0).astype(np.float64))
    res = run_predict(small_pipeline_cfg, None, raw, method="baseline", true_semantic=gt > 0, verbose=False)
    assert np.array_equal(res.labels, baseline_pipeline(gt > 0))
    assert np.array_equal(res.semantic, (gt > 0).astype(np.uint8))
    assert len(res.tiles) == 27


def test_embedding_method_needs_embedding_stage(small_pipeline_cfg: PipelineConfig) -> None:
    raw = ScalarVolume(np.random.default_rng(0).normal(size=(32, 32, 32)))
    state = init_network(small_pipeline_cfg.network)
    state.stage = "semantic"
    with pytest.raises(CheckpointMismatchError):
        run_predict(small_pipeline_cfg, state, raw, method="embedding", verbose=False)
    with pytest.raises(CheckpointMismatchError):
        run_predict(small_pipeline_cfg, None, raw, method="baseline", verbose=False)


def test_unknown_method(small_pipeline_cfg: PipelineConfig) -> None:
    gt = _rod_volume()
    with pytest.raises(ValueError):
        run_predict(small_pipeline_cfg, None, ScalarVolume(gt.astype(float)), method="kmeans", true_semantic=gt, verbose=False)


def test_run_predict_embedding_with_precomputed_tiles(tmp_path: Path, small_pipeline_cfg: PipelineConfig) -> None:
    gt = _rod_volume()
    cfg = small_pipeline_cfg
    preds, _ = _ideal_preds(gt, cfg)
    raw = ScalarVolume((gt > 0).astype(np.float64))
    res = run_predict(cfg, _embedding_state(cfg), raw, method="embedding", preds=preds, audit_path=tmp_path / "audit.json", verbose=False)
    assert adjusted_rand_index(gt, res.labels) == pytest.approx(1.0)
    assert np.array_equal(res.semantic, (gt > 0).astype(np.uint8))
    assert (tmp_path / "audit.json").exists()


def test_rerun_with_same_config_is_byte_identical(tmp_path: Path, small_pipeline_cfg: PipelineConfig) -> None:
    gt = _rod_volume()
    cfg = _with_policy(small_pipeline_cfg, "background")
    noise = np.random.default_rng(5).normal(0.0, 0.1, size=gt.shape)
    raw = ScalarVolume((gt > 0).astype(np.float64) + noise)
    save_checkpoint(_embedding_state(cfg), tmp_path / "net.ckpt")

    outputs = []
    for run in ("a", "b"):
        res = run_predict(
            cfg, load_checkpoint(tmp_path / "net.ckpt"), raw, method="embedding",
            true_semantic=gt > 0, audit_path=tmp_path / run / "audit.json", verbose=False,
        )
        save_volume(tmp_path / run / "labels", LabelVolume(res.labels))
        outputs.append(res)

    a, b = outputs
    assert a.probability.tobytes() == b.probability.tobytes()
    assert a.semantic.tobytes() == b.semantic.tobytes()
    assert all(ta[1].tobytes() == tb[1].tobytes() for ta, tb in zip(a.tiles, b.tiles))
    for name in ("labels.bin", "labels.json", "audit.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare_produces_four_rows(monkeypatch: pytest.MonkeyPatch, small_pipeline_cfg: PipelineConfig) -> None:
    gt = _rod_volume()
    cfg = small_pipeline_cfg
    preds, _ = _ideal_preds(gt, cfg)
    monkeypatch.setattr(pipeline, "infer_tiles", lambda *a, **k: preds)
    raw = ScalarVolume((gt > 0).astype(np.float64))
    comparison = run_compare(cfg, _embedding_state(cfg), raw, gt, verbose=False)
    assert comparison.table["setup"].tolist() == [name for name, _, _ in SETUPS]
    assert comparison.table["merged_ari"].tolist() == pytest.approx([1.0] * 4)
    assert comparison.table["dice"].tolist() == pytest.approx([1.0] * 4)
    assert (comparison.table["gt_instances"] == 4).all()
