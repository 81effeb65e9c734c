"""
pipeline.py — end-to-end prediction and the four-way method comparison.

What it does:
- infer_tiles: eval-mode forward pass over every tile of the plan (thread pool).
- stitch_semantic: average foreground probability over all tiles covering a voxel.
- segment_with_embeddings: per tile mask -> DBSCAN -> watershed fill, then merge.
- segment_with_baseline: erosion / components / fill on the full-volume mask.
- run_predict / run_compare: the orchestration behind `predict`, `eval` and `compare`.

A ground-truth mask passed as `true_semantic` replaces the thresholded prediction;
nothing else changes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from baseline import baseline_pipeline
from cluster import cluster_tile, dump_embeddings
from config import PipelineConfig, config_hash
from errors import CheckpointMismatchError, UnsegmentableTileError
from metrics import EvalReport, evaluate_report
from network import NetworkState, check_compatible, predict_tile
from postprocess import InstanceTile, MergeResult, merge_tiles, watershed_fill, write_audit
from volume import ScalarVolume, TilePlan, crop, make_tile_plan, normalize_volume, threshold_air_mask

TileLabels = Tuple[Tuple[int, int, int], np.ndarray]


@dataclass
class TilePrediction:
    origin: Tuple[int, int, int]
    fg_prob: np.ndarray       # (t, t, t)
    embedding: np.ndarray     # (D, t, t, t)


@dataclass
class PredictResult:
    method: str
    labels: np.ndarray
    semantic: np.ndarray
    tiles: List[TileLabels] = field(default_factory=list)
    probability: Optional[np.ndarray] = None
    merge: Optional[MergeResult] = None
    unsegmentable: List[Tuple[int, int, int]] = field(default_factory=list)


# ============================================================================
# INFERENCE
# ============================================================================
def plan_for(dims: Sequence[int], cfg: PipelineConfig) -> TilePlan:
    return make_tile_plan(dims, cfg.tiles.tile_size, cfg.tiles.overlap)


def infer_tiles(state: NetworkState, raw_norm: np.ndarray, plan: TilePlan, threads: int = 1) -> List[TilePrediction]:
    """Forward pass per tile; results follow plan order regardless of thread count."""

    def _one(origin: Tuple[int, int, int]) -> TilePrediction:
        fg, emb = predict_tile(state, crop(raw_norm, origin, plan.tile_size))
        return TilePrediction(origin=origin, fg_prob=fg, embedding=emb)

    if threads > 1 and len(plan.origins) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_one, plan.origins))
    return [_one(o) for o in plan.origins]


def stitch_semantic(preds: Sequence[TilePrediction], plan: TilePlan) -> np.ndarray:
    """Mean foreground probability over the covering tiles."""
    total = np.zeros(plan.dims)
    for p, box in zip(preds, plan.boxes()):
        total[box] += p.fg_prob
    return total / plan.coverage()


def _require_stage(state: Optional[NetworkState], cfg: PipelineConfig, stages: Sequence[str]) -> NetworkState:
    if state is None:
        raise CheckpointMismatchError("this method needs network weights (--weights)")
    check_compatible(state, cfg.network)
    if state.stage not in stages:
        raise CheckpointMismatchError(f"checkpoint stage {state.stage!r} cannot be used here; need one of {list(stages)}")
    return state


# ============================================================================
# SEGMENTATION
# ============================================================================
def segment_with_embeddings(
    preds: Sequence[TilePrediction],
    plan: TilePlan,
    cfg: PipelineConfig,
    fg_volume: Optional[np.ndarray] = None,
    air_mask: Optional[np.ndarray] = None,
    dump_dir: Optional[Path] = None,
    verbose: bool = False,
) -> Tuple[List[TileLabels], MergeResult, List[Tuple[int, int, int]]]:
    """Cluster and fill each tile, then merge.

    fg_volume (full-volume 0/1 or probability map) overrides each tile's own prediction;
    voxels outside air_mask are never foreground.
    """
    thr = cfg.predict.semantic_threshold
    filled: List[InstanceTile] = []
    bad: List[Tuple[int, int, int]] = []
    for p in preds:
        fg_prob = p.fg_prob if fg_volume is None else crop(fg_volume, p.origin, plan.tile_size).astype(np.float64)
        if air_mask is not None:
            fg_prob = np.where(crop(air_mask, p.origin, plan.tile_size), fg_prob, 0.0)
        raw_labels, points, point_labels = cluster_tile(p.embedding, fg_prob, cfg.dbscan, thr)
        if dump_dir is not None:
            z, y, x = p.origin
            dump_embeddings(points, point_labels, Path(dump_dir) / f"tile_z{z}_y{y}_x{x}.csv", p.origin)
        try:
            labels = watershed_fill(raw_labels, fg_prob > thr, origin=p.origin)
        except UnsegmentableTileError:
            if cfg.predict.on_unsegmentable == "error":
                raise
            if verbose:
                print(f"  ✗ Tile {p.origin}: no clusters, foreground dropped")
            bad.append(p.origin)
            labels = np.zeros(raw_labels.shape, dtype=np.uint32)
        filled.append(InstanceTile(origin=p.origin, labels=labels))
    merged = merge_tiles(filled, plan, cfg.merge, threads=cfg.threads)
    return [(t.origin, t.labels) for t in filled], merged, bad


def segment_with_baseline(mask: np.ndarray, plan: TilePlan, cfg: PipelineConfig) -> Tuple[np.ndarray, List[TileLabels]]:
    """Baseline on the whole volume; per-tile results are crops of it."""
    labels = baseline_pipeline(mask, cfg.baseline)
    return labels, [(o, crop(labels, o, plan.tile_size)) for o in plan.origins]


def run_predict(
    cfg: PipelineConfig,
    state: Optional[NetworkState],
    raw: ScalarVolume,
    method: str = "embedding",
    true_semantic: Optional[np.ndarray] = None,
    air_threshold: Optional[float] = None,
    dump_dir: Optional[Path] = None,
    audit_path: Optional[Path] = None,
    preds: Optional[List[TilePrediction]] = None,
    verbose: bool = True,
) -> PredictResult:
    """tile -> forward -> mask -> DBSCAN -> fill -> merge (or the baseline on the chosen mask)."""
    plan = plan_for(raw.dims, cfg)
    air = air_threshold if air_threshold is not None else cfg.predict.air_threshold
    air_mask = threshold_air_mask(raw, air).data.astype(bool) if air is not None else None
    thr = cfg.predict.semantic_threshold

    need_net = method == "embedding" or true_semantic is None
    probability = None
    if need_net:
        stages = ("embedding",) if method == "embedding" else ("semantic", "embedding")
        state = _require_stage(state, cfg, stages)
        if preds is None:
            if verbose:
                print(f"  Inference on {len(plan.origins)} tiles ({cfg.threads} thread(s))...")
            preds = infer_tiles(state, normalize_volume(raw).data, plan, cfg.threads)
        probability = stitch_semantic(preds, plan)

    fg_volume = (np.asarray(true_semantic) > 0).astype(np.float64) if true_semantic is not None else None
    semantic = (fg_volume if fg_volume is not None else probability) > thr
    if air_mask is not None:
        semantic &= air_mask
    semantic = semantic.astype(np.uint8)

    if method == "embedding":
        tiles, merged, bad = segment_with_embeddings(preds, plan, cfg, fg_volume, air_mask, dump_dir, verbose)
        if audit_path is not None:
            write_audit(merged, audit_path)
        result = PredictResult(method, merged.labels, semantic, tiles, probability, merged, bad)
    elif method == "baseline":
        labels, tiles = segment_with_baseline(semantic, plan, cfg)
        result = PredictResult(method, labels, semantic, tiles, probability)
    else:
        raise ValueError(f"unknown method {method!r}; expected 'embedding' or 'baseline'")

    if verbose:
        n = len(np.unique(result.labels)) - (1 if (result.labels == 0).any() else 0)
        print(f"  ✓ {method}: {n} instances, {int(semantic.sum())} foreground voxels")
    return result


# ============================================================================
# COMPARISON
# ============================================================================
SETUPS: Tuple[Tuple[str, str, bool], ...] = (
    ("embedding", "embedding", False),
    ("embedding+true_semantic", "embedding", True),
    ("baseline", "baseline", False),
    ("baseline+true_semantic", "baseline", True),
)


@dataclass
class Comparison:
    table: pd.DataFrame
    reports: Dict[str, EvalReport]
    results: Dict[str, PredictResult]


def evaluate_prediction(result: PredictResult, gt: np.ndarray, cfg: PipelineConfig, name: Optional[str] = None) -> EvalReport:
    report, _ = evaluate_report(
        gt, result.tiles, result.labels, result.semantic,
        method=name or result.method, config_hash=config_hash(cfg),
    )
    return report


def run_compare(
    cfg: PipelineConfig,
    state: NetworkState,
    raw: ScalarVolume,
    gt: np.ndarray,
    air_threshold: Optional[float] = None,
    verbose: bool = True,
) -> Comparison:
    """Embedding vs baseline, each with predicted and with ground-truth semantics."""
    state = _require_stage(state, cfg, ("embedding",))
    plan = plan_for(raw.dims, cfg)
    preds = infer_tiles(state, normalize_volume(raw).data, plan, cfg.threads)
    true_mask = (np.asarray(gt) > 0).astype(np.uint8)

    reports: Dict[str, EvalReport] = {}
    results: Dict[str, PredictResult] = {}
    for i, (name, method, use_true) in enumerate(SETUPS, start=1):
        if verbose:
            print(f"[{i}/{len(SETUPS)}] {name}...")
        res = run_predict(
            cfg, state, raw, method=method,
            true_semantic=true_mask if use_true else None,
            air_threshold=air_threshold, preds=preds, verbose=verbose,
        )
        results[name] = res
        reports[name] = evaluate_prediction(res, gt, cfg, name)

    table = pd.DataFrame(
        [
            {
                "setup": name,
                "mean_ari": r.mean_ari,
                "merged_ari": r.merged_ari,
                "dice": r.dice,
                "pred_instances": r.pred_instances,
                "gt_instances": r.gt_instances,
            }
            for name, r in reports.items()
        ]
    )
    return Comparison(table=table, reports=reports, results=results)
