from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cluster import (
    NOISE,
    EmbeddedPointSet,
    assignments_to_volume,
    cluster_tile,
    dbscan,
    dump_embeddings,
    mask_embeddings,
    region_query,
)
from config import DbscanParams
from volume import OUTLIER


def _naive_dbscan(x: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """All-pairs distances, same canonical visiting order."""
    n = len(x)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    nbrs = [np.flatnonzero(d2[i] <= eps * eps) for i in range(n)]
    core = [len(nb) >= min_pts for nb in nbrs]
    labels = [0] * n
    cid = 0
    for i in range(n):
        if labels[i] or not core[i]:
            continue
        cid += 1
        labels[i] = cid
        frontier = [i]
        while frontier:
            nxt = []
            for j in frontier:
                if not core[j]:
                    continue
                for k in nbrs[j]:
                    if labels[k] == 0:
                        labels[k] = cid
                        nxt.append(k)
            frontier = nxt
    return np.array([lab if lab else NOISE for lab in labels])


def test_two_blobs_and_an_isolated_point(rng: np.random.Generator) -> None:
    a = rng.normal(0.0, 0.05, size=(20, 3))
    b = rng.normal(5.0, 0.05, size=(20, 3))
    x = np.concatenate([a, b, [[10.0, 10.0, 10.0]]])
    labels = dbscan(x, DbscanParams(eps=0.5, min_pts=4))
    assert set(labels[:20]) == {1}
    assert set(labels[20:40]) == {2}
    assert labels[40] == NOISE


def test_all_points_noise_when_min_pts_too_high(rng: np.random.Generator) -> None:
    labels = dbscan(rng.uniform(0, 100, size=(10, 2)), DbscanParams(eps=0.1, min_pts=3))
    assert np.all(labels == NOISE)


def test_empty_point_set() -> None:
    assert dbscan(np.zeros((0, 4)), DbscanParams()).size == 0


def _check_against_oracle(rng: np.random.Generator, dims: int, trials: int, per_center: int) -> None:
    for trial in range(trials):
        centers = rng.uniform(-3, 3, size=(4, dims))
        x = np.concatenate([c + rng.normal(0, 0.4, size=(int(rng.integers(5, per_center + 1)), dims)) for c in centers])
        assert len(x) <= 500
        x = x[rng.permutation(len(x))]
        params = DbscanParams(eps=0.35 * np.sqrt(dims / 2), min_pts=5)
        assert np.array_equal(dbscan(x, params), _naive_dbscan(x, params.eps, params.min_pts)), trial


@pytest.mark.parametrize("dims", [2, 16])
def test_matches_all_pairs_oracle(dims: int, rng: np.random.Generator) -> None:
    _check_against_oracle(rng, dims, trials=10, per_center=60)


@pytest.mark.slow
@pytest.mark.parametrize("dims", [2, 16])
def test_matches_all_pairs_oracle_full(dims: int) -> None:
    _check_against_oracle(np.random.default_rng(100 + dims), dims, trials=100, per_center=125)


def test_region_query_includes_boundary_and_self() -> None:
    x = np.array([[0.0], [0.5], [0.5000001]])
    nb = region_query(x, 0.5)
    assert nb[0].tolist() == [0, 1]
    assert nb[1].tolist() == [0, 1, 2]


def test_mask_embeddings_counts_and_order() -> None:
    emb = np.arange(2 * 4 * 4 * 4, dtype=np.float64).reshape(2, 4, 4, 4)
    fg = np.zeros((4, 4, 4))
    fg[0, 0, 1] = 0.9
    fg[2, 3, 0] = 0.7
    fg[1, 1, 1] = 0.5
    pts = mask_embeddings(emb, fg, thr=0.5)
    assert len(pts) == 2
    assert pts.coords.tolist() == [[0, 0, 1], [2, 3, 0]]
    assert pts.vectors[1].tolist() == [emb[0, 2, 3, 0], emb[1, 2, 3, 0]]


def test_mask_embeddings_rejects_misaligned_map() -> None:
    with pytest.raises(ValueError):
        mask_embeddings(np.zeros((2, 4, 4, 4)), np.zeros((4, 4, 3)))


def test_assignments_to_volume() -> None:
    pts = EmbeddedPointSet(coords=np.array([[0, 0, 0], [1, 2, 3], [3, 3, 3]]), vectors=np.zeros((3, 2)))
    vol = assignments_to_volume(pts, np.array([1, NOISE, 2]), (4, 4, 4))
    assert vol.dtype == np.uint32
    assert vol[0, 0, 0] == 1
    assert vol[1, 2, 3] == OUTLIER
    assert vol[3, 3, 3] == 2
    assert int((vol > 0).sum()) == 3


def test_assignments_length_mismatch() -> None:
    pts = EmbeddedPointSet(coords=np.zeros((2, 3), dtype=np.int64), vectors=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        assignments_to_volume(pts, np.array([1]), (2, 2, 2))


def test_cluster_tile_separates_two_embedded_rods(tmp_path: Path) -> None:
    fg = np.zeros((8, 8, 8))
    fg[1:3, 1:3, :] = 1.0
    fg[5:7, 5:7, :] = 1.0
    emb = np.zeros((2, 8, 8, 8))
    emb[0, 5:7, 5:7, :] = 3.0
    labels, pts, point_labels = cluster_tile(emb, fg, DbscanParams(eps=0.5, min_pts=4))
    assert set(np.unique(labels[1:3, 1:3, :])) == {1}
    assert set(np.unique(labels[5:7, 5:7, :])) == {2}
    assert int((labels == 0).sum()) == fg.size - 64

    path = dump_embeddings(pts, point_labels, tmp_path / "tile.csv", origin=(8, 0, 0))
    table = pd.read_csv(path)
    assert list(table.columns) == ["x", "y", "z", "e1", "e2", "cluster"]
    assert len(table) == 64
    assert table["z"].min() == 9


def test_duplicate_vectors_match_oracle(rng: np.random.Generator) -> None:
    base = np.round(rng.normal(0, 1.0, size=(30, 2)), 1)
    x = base[rng.integers(0, 30, size=90)]
    params = DbscanParams(eps=0.3, min_pts=6)
    assert np.array_equal(dbscan(x, params), _naive_dbscan(x, params.eps, params.min_pts))
