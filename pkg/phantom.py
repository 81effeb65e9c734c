"""
phantom.py — deterministic synthetic fiber-composite volumes.

What it does:
- Places straight capsule fibers (cylinder + hemispherical caps) by rejection
  sampling, so instances never share or touch a voxel closer than min_clearance.
- Renders raw intensities: fiber indicator -> Gaussian blur -> additive noise.
- phantom_report() summarizes a ground-truth labeling.

Same PhantomConfig (seed included) gives bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from config import PhantomConfig
from errors import PlacementError
from volume import LabelVolume, ScalarVolume

AXES = {"z": 0, "y": 1, "x": 2}


@dataclass(frozen=True)
class FiberSpec:
    fiber_id: int
    p0: Tuple[float, float, float]
    p1: Tuple[float, float, float]
    radius: float
    voxels: int


@dataclass
class Phantom:
    raw: ScalarVolume
    gt: LabelVolume
    mask: LabelVolume
    fibers: List[FiberSpec] = field(default_factory=list)


@dataclass
class PhantomStats:
    count: int
    voxel_counts: Dict[int, int]
    volume_fraction: float
    fiber_fractions: Dict[int, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["voxel_counts"] = {str(k): v for k, v in self.voxel_counts.items()}
        d["fiber_fractions"] = {str(k): v for k, v in self.fiber_fractions.items()}
        return d


# ============================================================================
# GEOMETRY
# ============================================================================
def _bbox(p0: np.ndarray, p1: np.ndarray, reach: float, dims: Tuple[int, int, int]) -> Tuple[slice, ...]:
    lo = np.floor(np.minimum(p0, p1) - reach).astype(int)
    hi = np.ceil(np.maximum(p0, p1) + reach).astype(int) + 1
    lo = np.clip(lo, 0, dims)
    hi = np.clip(hi, 0, dims)
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def segment_distance(box: Tuple[slice, ...], p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Distance from every voxel center inside `box` to the segment p0-p1."""
    grids = np.meshgrid(*[np.arange(s.start, s.stop, dtype=np.float64) for s in box], indexing="ij")
    q = np.stack(grids, axis=-1)
    d = p1 - p0
    dd = float(d @ d)
    if dd == 0.0:
        t = np.zeros(q.shape[:-1])
    else:
        t = np.clip(((q - p0) @ d) / dd, 0.0, 1.0)
    closest = p0 + t[..., None] * d
    return np.linalg.norm(q - closest, axis=-1)


def rasterize_capsule(dims: Tuple[int, int, int], p0, p1, radius: float) -> np.ndarray:
    """Boolean mask of voxels whose center lies within `radius` of segment p0-p1."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    out = np.zeros(dims, dtype=bool)
    box = _bbox(p0, p1, radius, dims)
    if any(s.stop <= s.start for s in box):
        return out
    out[box] = segment_distance(box, p0, p1) <= radius
    return out


def _sample_direction(rng: np.random.Generator, axis: int, cone_deg: float) -> np.ndarray:
    """Unit vector uniformly distributed on the spherical cap around `axis`."""
    cos_max = math.cos(math.radians(cone_deg))
    cos_t = rng.uniform(cos_max, 1.0)
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    e = np.zeros(3)
    e[axis] = 1.0
    u = np.zeros(3)
    u[(axis + 1) % 3] = 1.0
    w = np.cross(e, u)
    return cos_t * e + sin_t * (math.cos(phi) * u + math.sin(phi) * w)


# ============================================================================
# GENERATION
# ============================================================================
def generate_phantom(cfg: PhantomConfig, verbose: bool = False) -> Phantom:
    """Raw volume, instance ground truth (IDs 1..K) and binary mask."""
    dims = tuple(int(d) for d in cfg.dims)
    rng = np.random.default_rng(cfg.seed)
    gt = np.zeros(dims, dtype=np.uint32)
    axis = AXES[cfg.principal_axis]
    fibers: List[FiberSpec] = []

    for _ in range(cfg.fiber_count):
        for _attempt in range(cfg.max_retries):
            center = rng.uniform(0.0, 1.0, size=3) * (np.asarray(dims) - 1)
            direction = _sample_direction(rng, axis, cfg.orientation_cone_deg)
            length = rng.uniform(*cfg.length_range_vox)
            radius = rng.uniform(*cfg.radius_range_vox)
            p0 = center - 0.5 * length * direction
            p1 = center + 0.5 * length * direction

            reach = radius + cfg.min_clearance_vox
            box = _bbox(p0, p1, reach, dims)
            if any(s.stop <= s.start for s in box):
                continue
            dist = segment_distance(box, p0, p1)
            body = dist <= radius
            if not body.any():
                continue
            if (gt[box][dist <= reach] != 0).any():
                continue
            fid = len(fibers) + 1
            gt[box][body] = fid
            fibers.append(
                FiberSpec(fid, tuple(p0.tolist()), tuple(p1.tolist()), float(radius), int(body.sum()))
            )
            break

    if not fibers:
        raise PlacementError(
            f"could not place any fiber in {dims} after {cfg.max_retries} retries per fiber"
        )
    if verbose:
        print(f"  ✓ Placed {len(fibers)}/{cfg.fiber_count} fibers in {dims}")

    mask = (gt > 0).astype(np.uint8)
    raw = mask.astype(np.float64)
    if cfg.blur_sigma_vox > 0:
        raw = ndimage.gaussian_filter(raw, sigma=cfg.blur_sigma_vox, mode="nearest")
    if cfg.noise_sigma > 0:
        raw = raw + rng.normal(0.0, cfg.noise_sigma, size=dims)

    return Phantom(
        raw=ScalarVolume(raw),
        gt=LabelVolume(gt),
        mask=LabelVolume(mask),
        fibers=fibers,
    )


def phantom_report(gt: LabelVolume | np.ndarray) -> PhantomStats:
    """Instance count, voxels per fiber, and foreground volume fraction."""
    data = gt.data if isinstance(gt, LabelVolume) else np.asarray(gt)
    ids, counts = np.unique(data[data != 0], return_counts=True)
    total = int(data.size)
    voxel_counts = {int(i): int(c) for i, c in zip(ids, counts)}
    return PhantomStats(
        count=len(voxel_counts),
        voxel_counts=voxel_counts,
        volume_fraction=float(counts.sum()) / total if total else 0.0,
        fiber_fractions={i: c / total for i, c in voxel_counts.items()},
    )
