"""
cluster.py
Turn one tile's embeddings into a spatial labeling.

What it does:
- mask_embeddings: keep voxels whose foreground probability exceeds the threshold.
- dbscan: exact DBSCAN in embedding space (k-d tree candidates, exact distance filter).
  Clusters are grown in canonical point order, so border points go to the first
  cluster that reaches them and runs are reproducible.
- assignments_to_volume: clusters back onto the tile grid, OUTLIER for noise points.
- dump_embeddings: CSV (x, y, z, e1..eD, cluster) for external inspection.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from config import DbscanParams
from volume import OUTLIER

NOISE = -1


@dataclass
class EmbeddedPointSet:
    """coords (N, 3) voxel indices in z, y, x order; vectors (N, D)."""

    coords: np.ndarray
    vectors: np.ndarray

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def dims(self) -> int:
        return int(self.vectors.shape[1])


def mask_embeddings(embedding: np.ndarray, semantic_fg: np.ndarray, thr: float = 0.5) -> EmbeddedPointSet:
    """embedding (D, d, h, w), semantic_fg (d, h, w). Points are in lexicographic voxel order."""
    if embedding.shape[1:] != semantic_fg.shape:
        raise ValueError(f"embedding {embedding.shape} not aligned with foreground map {semantic_fg.shape}")
    index = np.nonzero(semantic_fg > thr)
    coords = np.stack(index, axis=1).astype(np.int64) if index[0].size else np.zeros((0, 3), dtype=np.int64)
    vectors = np.ascontiguousarray(embedding[(slice(None),) + index].T, dtype=np.float64)
    if vectors.size and not np.all(np.isfinite(vectors)):
        raise ValueError("embedding contains non-finite values")
    return EmbeddedPointSet(coords=coords, vectors=vectors.reshape(len(coords), embedding.shape[0]))


def region_query(x: np.ndarray, eps: float) -> List[np.ndarray]:
    """Exact eps-neighborhoods (self included), each sorted ascending."""
    tree = cKDTree(x)
    candidates = tree.query_ball_point(x, r=eps * (1.0 + 1e-9) + 1e-12)
    eps2 = eps * eps
    out: List[np.ndarray] = []
    for i, cand in enumerate(candidates):
        nb = np.asarray(sorted(cand), dtype=np.int64)
        d2 = ((x[nb] - x[i]) ** 2).sum(axis=1)
        out.append(nb[d2 <= eps2])
    return out


def dbscan(points: EmbeddedPointSet | np.ndarray, params: DbscanParams) -> np.ndarray:
    """Per-point labels: 1..K for clusters, NOISE (-1) for outliers.

    Identical vectors are collapsed into one weighted point first; they share a
    neighborhood, so the labeling is unchanged.
    """
    x = points.vectors if isinstance(points, EmbeddedPointSet) else np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    uniq, first, inverse, counts = np.unique(x, axis=0, return_index=True, return_inverse=True, return_counts=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    reps = uniq[order]
    weight = counts[order]
    neighbors = region_query(reps, params.eps)
    core = np.fromiter((weight[nb].sum() >= params.min_pts for nb in neighbors), dtype=bool, count=len(reps))

    labels = np.zeros(len(reps), dtype=np.int64)
    cid = 0
    for i in range(len(reps)):
        if labels[i] != 0 or not core[i]:
            continue
        cid += 1
        labels[i] = cid
        queue = deque([i])
        while queue:
            j = queue.popleft()
            if not core[j]:
                continue
            for k in neighbors[j]:
                if labels[k] == 0:
                    labels[k] = cid
                    queue.append(k)
    labels[labels == 0] = NOISE
    return labels[rank[inverse.reshape(-1)]]


def assignments_to_volume(points: EmbeddedPointSet, labels: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """uint32 tile: cluster k -> k, noise -> OUTLIER, everything else 0."""
    dims = tuple(int(d) for d in dims)
    if len(labels) != len(points):
        raise ValueError(f"{len(labels)} labels for {len(points)} points")
    out = np.zeros(dims, dtype=np.uint32)
    if len(points) == 0:
        return out
    c = points.coords
    if (c < 0).any() or (c >= np.asarray(dims)).any():
        raise ValueError(f"point coordinates fall outside tile {dims}")
    values = np.where(labels == NOISE, OUTLIER, labels).astype(np.uint32)
    out[c[:, 0], c[:, 1], c[:, 2]] = values
    return out


def cluster_tile(
    embedding: np.ndarray, semantic_fg: np.ndarray, params: DbscanParams, thr: float = 0.5
) -> Tuple[np.ndarray, EmbeddedPointSet, np.ndarray]:
    """mask -> DBSCAN -> label tile (with OUTLIER sentinels)."""
    points = mask_embeddings(embedding, semantic_fg, thr)
    labels = dbscan(points, params)
    return assignments_to_volume(points, labels, semantic_fg.shape), points, labels


def embedding_table(points: EmbeddedPointSet, labels: np.ndarray, origin: Sequence[int] = (0, 0, 0)) -> pd.DataFrame:
    """One row per point in volume coordinates."""
    c = points.coords + np.asarray(origin, dtype=np.int64)
    df = pd.DataFrame({"x": c[:, 2], "y": c[:, 1], "z": c[:, 0]})
    for d in range(points.vectors.shape[1]):
        df[f"e{d + 1}"] = points.vectors[:, d]
    df["cluster"] = labels
    return df


def dump_embeddings(points: EmbeddedPointSet, labels: np.ndarray, path: str | Path, origin: Sequence[int] = (0, 0, 0)) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    embedding_table(points, labels, origin).to_csv(p, index=False)
    return p
