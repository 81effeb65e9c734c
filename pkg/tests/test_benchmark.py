from __future__ import annotations

import time
from pathlib import Path

import pytest

from config import benchmark_config, load_config
from phantom import generate_phantom
from pipeline import run_compare
from train import train_embedding, train_semantic
from volume import normalize_volume

ROOT = Path(__file__).resolve().parents[1]

MIN_DICE = 0.95
MIN_MERGED_ARI = 0.70
MIN_BASELINE_GAP = 0.15
BUDGET_S = 30 * 60


def test_benchmark_json_matches_preset() -> None:
    assert load_config(ROOT / "configs" / "benchmark.json") == benchmark_config()


@pytest.mark.benchmark
def test_phantom_benchmark_orderings(tmp_path: Path) -> None:
    cfg = benchmark_config()
    assert cfg.phantom.dims == (64, 64, 64)
    assert cfg.phantom.fiber_count == 25

    t0 = time.perf_counter()
    ph = generate_phantom(cfg.phantom)
    raw = normalize_volume(ph.raw).data
    gt = ph.gt.data
    sem = train_semantic(raw, gt > 0, cfg.train, cfg.network, verbose=False)
    emb = train_embedding(sem.state, raw, gt, cfg.train, verbose=False)
    comparison = run_compare(cfg, emb.state, ph.raw, gt, verbose=False)
    elapsed = time.perf_counter() - t0

    comparison.table.to_csv(tmp_path / "compare.csv", index=False)
    r = comparison.reports
    assert r["embedding"].dice >= MIN_DICE
    assert r["embedding"].merged_ari >= MIN_MERGED_ARI
    assert r["baseline"].merged_ari <= r["embedding"].merged_ari - MIN_BASELINE_GAP
    assert r["embedding+true_semantic"].merged_ari >= r["embedding"].merged_ari
    assert elapsed <= BUDGET_S
