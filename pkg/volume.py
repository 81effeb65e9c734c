"""
volume.py — dense 3D grids and everything that cuts, normalizes, augments
and stores them.

What it does:
- ScalarVolume / LabelVolume: immutable (depth, height, width) grids in z-major order.
- normalize_volume / threshold_air_mask: intensity preprocessing.
- make_tile_plan / crop: overlapping tiles, last tile per axis clamped flush.
- Isometry / augment: random flips + 90° rotations applied jointly to several grids.
- save_volume / load_volume: `<name>.bin` little-endian payload + `<name>.json` sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import DegenerateInputError, TilingError, VolumeFormatError

Dims = Tuple[int, int, int]
Origin = Tuple[int, int, int]

BACKGROUND = 0
OUTLIER = int(np.iinfo(np.uint32).max)

# dtype tag <-> little-endian numpy dtype
DTYPE_TAGS: Dict[str, np.dtype] = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
    "u32": np.dtype("<u4"),
}
ORDER = "zyx"


# ============================================================================
# VOLUME TYPES
# ============================================================================
@dataclass(frozen=True)
class ScalarVolume:
    """Intensities or confidences. `data` is read-only after construction."""

    data: np.ndarray
    voxel_size_um: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, order="C")
        if arr.ndim != 3 or min(arr.shape) <= 0:
            raise VolumeFormatError(f"ScalarVolume needs a non-empty 3D array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise VolumeFormatError("ScalarVolume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class LabelVolume:
    """Instance IDs: 0 = background, OUTLIER = unassigned foreground."""

    data: np.ndarray
    voxel_size_um: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, order="C")
        if arr.ndim != 3 or min(arr.shape) <= 0:
            raise VolumeFormatError(f"LabelVolume needs a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        elif arr.dtype not in (np.uint8, np.uint32):
            if arr.size and (arr.min() < 0 or arr.max() > OUTLIER):
                raise VolumeFormatError("label IDs must fit in uint32")
            arr = arr.astype(np.uint32)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.data)
        return ids[(ids != BACKGROUND) & (ids != OUTLIER)]


# ============================================================================
# INTENSITY PREPROCESSING
# ============================================================================
def normalize_volume(v: ScalarVolume) -> ScalarVolume:
    """Zero mean, unit population std (float64)."""
    x = v.data.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if std == 0.0:
        raise DegenerateInputError("cannot normalize a constant volume (std = 0)")
    out = (x - mean) / std
    # second pass removes the residual mean left by rounding in the first
    out -= out.mean()
    out /= out.std()
    return ScalarVolume(out, v.voxel_size_um)


def threshold_air_mask(v: ScalarVolume, thr: float) -> LabelVolume:
    """Binary material mask: 1 where intensity > thr."""
    if not np.isfinite(thr):
        raise ValueError(f"air threshold must be finite, got {thr}")
    return LabelVolume((v.data > thr).astype(np.uint8), v.voxel_size_um)


# ============================================================================
# TILING
# ============================================================================
@dataclass(frozen=True)
class TilePlan:
    dims: Dims
    tile_size: int
    stride: int
    origins: Tuple[Origin, ...] = field(default_factory=tuple)

    @property
    def overlap(self) -> int:
        return self.tile_size - self.stride

    def boxes(self) -> Iterator[Tuple[slice, slice, slice]]:
        for o in self.origins:
            yield tile_slices(o, self.tile_size)

    def coverage(self) -> np.ndarray:
        """How many tiles cover each voxel."""
        count = np.zeros(self.dims, dtype=np.int32)
        for box in self.boxes():
            count[box] += 1
        return count


def _axis_origins(dim: int, tile_size: int, stride: int) -> List[int]:
    starts = list(range(0, dim - tile_size + 1, stride))
    if starts[-1] + tile_size < dim:
        starts.append(dim - tile_size)
    return starts


def make_tile_plan(dims: Sequence[int], tile_size: int = 32, overlap: int = 16) -> TilePlan:
    """Overlapping tile origins, z-major order. Edge tiles are clamped flush, never padded."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise TilingError(f"dims must be three positive ints, got {dims}")
    if tile_size < 1 or not (0 <= overlap < tile_size):
        raise TilingError(f"need 0 <= overlap < tile_size, got overlap={overlap}, tile_size={tile_size}")
    if any(d < tile_size for d in dims):
        raise TilingError(f"volume {dims} is smaller than tile_size {tile_size}; pad it first")
    stride = tile_size - overlap
    per_axis = [_axis_origins(d, tile_size, stride) for d in dims]
    origins = tuple((z, y, x) for z in per_axis[0] for y in per_axis[1] for x in per_axis[2])
    return TilePlan(dims=dims, tile_size=tile_size, stride=stride, origins=origins)


def tile_slices(origin: Origin, tile_size: int) -> Tuple[slice, slice, slice]:
    return tuple(slice(o, o + tile_size) for o in origin)  # type: ignore[return-value]


def crop(arr: np.ndarray, origin: Origin, tile_size: int) -> np.ndarray:
    """Copy of one tile out of a (..., D, H, W) array."""
    box = tile_slices(origin, tile_size)
    return np.array(arr[(Ellipsis,) + box])


# ============================================================================
# AUGMENTATION
# ============================================================================
ROTATION_PLANES: Tuple[Tuple[int, int], ...] = ((1, 2), (0, 2), (0, 1))


@dataclass(frozen=True)
class Isometry:
    """Axis flips followed by k quarter turns in one axis plane."""

    flips: Tuple[bool, bool, bool] = (False, False, False)
    plane: Tuple[int, int] = (1, 2)
    k: int = 0

    @property
    def is_identity(self) -> bool:
        return not any(self.flips) and self.k % 4 == 0

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Transform the last three axes of `a` (leading channel axes are carried along)."""
        off = a.ndim - 3
        out = a
        for axis, flip in enumerate(self.flips):
            if flip:
                out = np.flip(out, axis=off + axis)
        if self.k % 4:
            if out.shape[off + self.plane[0]] != out.shape[off + self.plane[1]]:
                raise TilingError(f"rotation needs a square plane, got shape {out.shape[off:]}")
            out = np.rot90(out, k=self.k, axes=(off + self.plane[0], off + self.plane[1]))
        return np.ascontiguousarray(out)

    def invert(self, a: np.ndarray) -> np.ndarray:
        off = a.ndim - 3
        out = a
        if self.k % 4:
            out = np.rot90(out, k=-self.k, axes=(off + self.plane[0], off + self.plane[1]))
        for axis, flip in enumerate(self.flips):
            if flip:
                out = np.flip(out, axis=off + axis)
        return np.ascontiguousarray(out)


def random_isometry(rng: np.random.Generator) -> Isometry:
    flips = tuple(bool(f) for f in rng.integers(0, 2, size=3))
    plane = ROTATION_PLANES[int(rng.integers(0, len(ROTATION_PLANES)))]
    k = int(rng.integers(0, 4))
    return Isometry(flips=flips, plane=plane, k=k)  # type: ignore[arg-type]


def augment(
    arrays: Sequence[np.ndarray], rng: np.random.Generator, iso: Optional[Isometry] = None
) -> Tuple[List[np.ndarray], Isometry]:
    """Apply one random isometry to every array (raw, gt, mask...) of a cubic tile."""
    shapes = {a.shape[-3:] for a in arrays}
    if len(shapes) != 1:
        raise TilingError(f"augment needs aligned tiles, got {sorted(shapes)}")
    shape = shapes.pop()
    if len(set(shape)) != 1:
        raise TilingError(f"augment needs a cubic tile, got {shape}")
    if iso is None:
        iso = random_isometry(rng)
    return [iso.apply(a) for a in arrays], iso


# ============================================================================
# FILE I/O
# ============================================================================
def _paths(path: str | Path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".bin"), p.with_name(p.name + ".json")


def _tag_for(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    for tag, dt in DTYPE_TAGS.items():
        if (dt.kind, dt.itemsize) == (dtype.kind, dtype.itemsize):
            return tag
    raise VolumeFormatError(f"unsupported dtype {dtype}; expected one of {sorted(DTYPE_TAGS)}")


def save_volume(path: str | Path, vol: ScalarVolume | LabelVolume) -> Path:
    """Write `<path>.bin` + `<path>.json`. Returns the .bin path."""
    bin_path, json_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    tag = _tag_for(vol.data.dtype)
    payload = np.ascontiguousarray(vol.data, dtype=DTYPE_TAGS[tag])
    bin_path.write_bytes(payload.tobytes(order="C"))
    header = {
        "dims": list(vol.dims),
        "dtype": tag,
        "order": ORDER,
        "voxel_size_um": float(vol.voxel_size_um),
        "kind": "label" if isinstance(vol, LabelVolume) else "scalar",
    }
    json_path.write_text(json.dumps(header, indent=2), encoding="utf-8")
    return bin_path


def load_volume(path: str | Path) -> ScalarVolume | LabelVolume:
    bin_path, json_path = _paths(path)
    if not json_path.exists():
        raise VolumeFormatError(f"missing header sidecar {json_path}")
    header = json.loads(json_path.read_text(encoding="utf-8"))
    tag = header.get("dtype")
    if tag not in DTYPE_TAGS:
        raise VolumeFormatError(f"unknown dtype tag {tag!r} in {json_path}")
    if header.get("order", ORDER) != ORDER:
        raise VolumeFormatError(f"unsupported memory order {header.get('order')!r}; only {ORDER!r}")
    dims = tuple(int(d) for d in header.get("dims", ()))
    if len(dims) != 3 or min(dims) <= 0:
        raise VolumeFormatError(f"header dims must be three positive ints, got {header.get('dims')}")
    dt = DTYPE_TAGS[tag]
    raw = bin_path.read_bytes()
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{bin_path}: header says {dims} {tag} ({expected} bytes) but payload has {len(raw)} bytes"
        )
    data = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    voxel = float(header.get("voxel_size_um", 1.0))
    kind = header.get("kind") or ("scalar" if tag.startswith("f") else "label")
    if kind == "scalar":
        return ScalarVolume(data, voxel)
    return LabelVolume(data, voxel)
