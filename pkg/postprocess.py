"""
postprocess.py — outlier fill and cross-tile merging.

What it does:
- watershed_fill: grows seed labels through the foreground (26-connected, level by
  level) so every foreground voxel ends up with the nearest seed's ID.
- compute_overlap_links: co-occupancy counts between fibers of two overlapping tiles.
- merge_tiles: connected components of the link graph (edges where count > threshold),
  then one global labeling where each voxel is taken from the tile whose center is nearest.
- propagate_merge_ids: the greedy fiber-by-fiber propagation, kept as an
  independent implementation of the same partition.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import MergeParams
from errors import TilingError, UnsegmentableTileError
from volume import BACKGROUND, OUTLIER, TilePlan

Node = Tuple[int, int]  # (tile index, local id)

NEIGHBOR_OFFSETS: Tuple[Tuple[int, int, int], ...] = tuple(
    o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)
)


# ============================================================================
# WATERSHED FILL
# ============================================================================
def _neighbor_min(values: np.ndarray) -> np.ndarray:
    """Per voxel, the minimum of `values` over its 26 neighbors (OUTLIER outside the grid)."""
    padded = np.pad(values, 1, mode="constant", constant_values=OUTLIER)
    D, H, W = values.shape
    best = np.full(values.shape, OUTLIER, dtype=values.dtype)
    for dz, dy, dx in NEIGHBOR_OFFSETS:
        np.minimum(best, padded[1 + dz:1 + dz + D, 1 + dy:1 + dy + H, 1 + dx:1 + dx + W], out=best)
    return best


def watershed_fill(tile_labels: np.ndarray, foreground: np.ndarray, origin: Optional[tuple] = None) -> np.ndarray:
    """Assign every non-seed foreground voxel (outliers included) to its geodesically nearest seed.

    Seeds are voxels labeled with anything other than 0 or OUTLIER. Ties go to the smaller ID.
    Foreground components with no path to a seed take the Euclidean-nearest seed voxel's ID.
    """
    labels = np.asarray(tile_labels).astype(np.uint32)
    fg = np.asarray(foreground) > 0
    if labels.shape != fg.shape:
        raise ValueError(f"labels {labels.shape} and foreground {fg.shape} are not aligned")
    outliers = labels == OUTLIER
    if (outliers & ~fg).any():
        raise ValueError("outlier voxels must lie inside the foreground")
    seeds = (labels != BACKGROUND) & ~outliers
    targets = fg & ~seeds
    if not targets.any():
        return labels
    if not seeds.any():
        raise UnsegmentableTileError(
            f"{int(targets.sum())} foreground voxels but no seed to grow from", origin=origin
        )

    out = np.where(seeds, labels, BACKGROUND).astype(np.uint32)
    frontier = np.where(seeds, labels, OUTLIER).astype(np.uint32)
    pending = targets.copy()
    while True:
        reach = _neighbor_min(frontier)
        newly = pending & (reach != OUTLIER)
        if not newly.any():
            break
        out[newly] = reach[newly]
        pending &= ~newly
        frontier = np.where(newly, reach, OUTLIER).astype(np.uint32)

    if pending.any():
        _, idx = ndimage.distance_transform_edt(~seeds, return_indices=True)
        nearest = out[tuple(i[pending] for i in idx)]
        out[pending] = nearest
    return out


# ============================================================================
# TILES AND LINKS
# ============================================================================
@dataclass
class InstanceTile:
    origin: Tuple[int, int, int]
    labels: np.ndarray

    @property
    def size(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.labels.shape)  # type: ignore[return-value]

    def local_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids != BACKGROUND]


@dataclass(frozen=True)
class OverlapLink:
    tile_a: int
    id_a: int
    tile_b: int
    id_b: int
    affinity: int


def overlap_box(a: InstanceTile, b: InstanceTile) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    lo = np.maximum(a.origin, b.origin)
    hi = np.minimum(np.add(a.origin, a.size), np.add(b.origin, b.size))
    if (hi <= lo).any():
        return None
    return lo, hi


def compute_overlap_links(a: InstanceTile, b: InstanceTile, index_a: int = 0, index_b: int = 1) -> List[OverlapLink]:
    """Exact co-occupancy count for every (fiber in a, fiber in b) pair inside the overlap."""
    box = overlap_box(a, b)
    if box is None:
        raise TilingError(f"tiles at {a.origin} and {b.origin} do not overlap")
    lo, hi = box
    sa = tuple(slice(int(l - o), int(h - o)) for l, h, o in zip(lo, hi, a.origin))
    sb = tuple(slice(int(l - o), int(h - o)) for l, h, o in zip(lo, hi, b.origin))
    la = a.labels[sa].ravel()
    lb = b.labels[sb].ravel()
    both = (la != BACKGROUND) & (lb != BACKGROUND)
    if not both.any():
        return []
    pairs, counts = np.unique(np.stack([la[both], lb[both]], axis=1), axis=0, return_counts=True)
    return [
        OverlapLink(index_a, int(f), index_b, int(g), int(c))
        for (f, g), c in zip(pairs, counts)
    ]


# ============================================================================
# COMPONENTS
# ============================================================================
class DisjointSet:
    """Union-find over hashable nodes; the root is always the earliest-inserted member."""

    def __init__(self, nodes: Iterable[Hashable] = ()):
        self.parent: Dict[Hashable, Hashable] = {}
        self.rank: Dict[Hashable, int] = {}
        for n in nodes:
            self.add(n)

    def add(self, n: Hashable) -> None:
        if n not in self.parent:
            self.parent[n] = n
            self.rank[n] = len(self.rank)

    def find(self, n: Hashable) -> Hashable:
        root = n
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[n] != root:
            self.parent[n], n = root, self.parent[n]
        return root

    def union(self, a: Hashable, b: Hashable) -> Hashable:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.rank[rb] < self.rank[ra]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return ra


def link_components(nodes: Sequence[Node], links: Iterable[OverlapLink], threshold: int) -> Dict[Node, int]:
    """Global ID per node (1..K, first-appearance order over `nodes`) via union-find."""
    ds = DisjointSet(nodes)
    for link in links:
        if link.affinity > threshold:
            ds.union((link.tile_a, link.id_a), (link.tile_b, link.id_b))
    ids: Dict[Node, int] = {}
    root_ids: Dict[Hashable, int] = {}
    for n in nodes:
        r = ds.find(n)
        if r not in root_ids:
            root_ids[r] = len(root_ids) + 1
        ids[n] = root_ids[r]
    return ids


def propagate_merge_ids(nodes: Sequence[Node], links: Iterable[OverlapLink], threshold: int) -> Dict[Node, int]:
    """Greedy merge: take the next unlabeled fiber, give it a new ID, and push that ID to every
    fiber it links to with count > threshold, recursively (explicit stack)."""
    adjacency: Dict[Node, List[Node]] = {n: [] for n in nodes}
    for link in links:
        if link.affinity > threshold:
            a, b = (link.tile_a, link.id_a), (link.tile_b, link.id_b)
            adjacency[a].append(b)
            adjacency[b].append(a)
    ids: Dict[Node, int] = {}
    next_id = 0
    for n in nodes:
        if n in ids:
            continue
        next_id += 1
        ids[n] = next_id
        stack = [n]
        while stack:
            f = stack.pop()
            for g in adjacency[f]:
                if g not in ids:
                    ids[g] = next_id
                    stack.append(g)
    return ids


# ============================================================================
# MERGE
# ============================================================================
@dataclass
class MergeResult:
    labels: np.ndarray
    links: List[OverlapLink] = field(default_factory=list)
    node_ids: Dict[Node, int] = field(default_factory=dict)
    origins: List[Tuple[int, int, int]] = field(default_factory=list)
    threshold: int = 3

    @property
    def n_instances(self) -> int:
        return int(np.count_nonzero(np.unique(self.labels)))

    def audit(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_tiles": len(self.origins),
            "n_instances": self.n_instances,
            "links": [
                {
                    "tile_a": list(self.origins[l.tile_a]), "id_a": l.id_a,
                    "tile_b": list(self.origins[l.tile_b]), "id_b": l.id_b,
                    "affinity": l.affinity, "merged": l.affinity > self.threshold,
                }
                for l in self.links
            ],
            "assignments": [
                {"tile": list(self.origins[t]), "local_id": lid, "global_id": gid}
                for (t, lid), gid in self.node_ids.items()
            ],
        }


def write_audit(result: MergeResult, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(result.audit(), indent=2), encoding="utf-8")
    return p


def _compact_ids(labels: np.ndarray, node_ids: Dict[Node, int]) -> Tuple[np.ndarray, Dict[Node, int]]:
    """Renumber the IDs that own voxels to 1..K in z-major first-occurrence order.

    Nodes whose voxels all lost the nearest-center vote map to 0.
    """
    ids, first = np.unique(labels.ravel(), return_index=True)
    keep = ids != 0
    ordered = ids[keep][np.argsort(first[keep], kind="stable")]
    lut = np.zeros(int(labels.max()) + 1, dtype=np.uint32)
    lut[ordered] = np.arange(1, len(ordered) + 1, dtype=np.uint32)
    remapped = {n: int(lut[g]) if g < len(lut) else 0 for n, g in node_ids.items()}
    return lut[labels], remapped


def merge_tiles(
    tiles: Sequence[InstanceTile],
    plan: TilePlan,
    params: MergeParams,
    strategy: str = "union_find",
    threads: int = 1,
) -> MergeResult:
    """Merge outlier-free per-tile labelings into one volume with global IDs 1..K.

    K counts only the IDs that still own voxels after nearest-center stitching.
    """
    order = sorted(range(len(tiles)), key=lambda i: tuple(tiles[i].origin))
    tiles = [tiles[i] for i in order]
    origins = [tuple(int(o) for o in t.origin) for t in tiles]
    if set(origins) != set(plan.origins) or len(origins) != len(plan.origins):
        raise TilingError(f"{len(origins)} tiles do not match the {len(plan.origins)}-tile plan")
    for t in tiles:
        if t.size != (plan.tile_size,) * 3:
            raise TilingError(f"tile at {t.origin} has shape {t.size}, plan tile_size is {plan.tile_size}")
        if (t.labels == OUTLIER).any():
            raise ValueError(f"tile at {t.origin} still contains outlier voxels; run watershed_fill first")

    nodes: List[Node] = [(i, int(lid)) for i, t in enumerate(tiles) for lid in t.local_ids()]
    pairs = [
        (i, j)
        for i in range(len(tiles))
        for j in range(i + 1, len(tiles))
        if overlap_box(tiles[i], tiles[j]) is not None
    ]

    def _links(pair: Tuple[int, int]) -> List[OverlapLink]:
        i, j = pair
        return compute_overlap_links(tiles[i], tiles[j], i, j)

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_pair = list(pool.map(_links, pairs))
    else:
        per_pair = [_links(p) for p in pairs]
    links = [l for chunk in per_pair for l in chunk]

    if strategy == "union_find":
        node_ids = link_components(nodes, links, params.threshold)
    elif strategy == "recursive":
        node_ids = propagate_merge_ids(nodes, links, params.threshold)
    else:
        raise ValueError(f"unknown merge strategy {strategy!r}")

    out = np.zeros(plan.dims, dtype=np.uint32)
    best = np.full(plan.dims, np.inf)
    half = (plan.tile_size - 1) / 2.0
    grids = np.meshgrid(*[np.arange(plan.tile_size, dtype=np.float64) - half] * 3, indexing="ij")
    d2 = grids[0] ** 2 + grids[1] ** 2 + grids[2] ** 2
    for i, t in enumerate(tiles):
        box = tuple(slice(o, o + plan.tile_size) for o in t.origin)
        lut = np.zeros(int(t.labels.max()) + 1, dtype=np.uint32)
        for lid in t.local_ids():
            lut[int(lid)] = node_ids[(i, int(lid))]
        win = d2 < best[box]
        best[box] = np.where(win, d2, best[box])
        out[box] = np.where(win, lut[t.labels], out[box])

    if np.isinf(best).any():
        raise TilingError(f"{int(np.isinf(best).sum())} voxels are not covered by any tile")
    out, node_ids = _compact_ids(out, node_ids)
    return MergeResult(labels=out, links=links, node_ids=node_ids, origins=origins, threshold=params.threshold)
