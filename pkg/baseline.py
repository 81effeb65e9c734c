"""
baseline.py — classical instance separation used as the comparison method.

Erosion splits thin contacts, connected components number what is left, and
watershed_fill grows those seeds back over the original mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from scipy import ndimage

from config import BaselineSettings
from errors import DegenerateInputError
from postprocess import watershed_fill


@dataclass(frozen=True)
class StructuringElement:
    """6 -> L1 ball of radius r, 26 -> Chebyshev ball (cube) of radius r."""

    radius: int = 1
    connectivity: Literal[6, 26] = 26

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"structuring element radius must be >= 1, got {self.radius}")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")

    def array(self) -> np.ndarray:
        r = self.radius
        if self.connectivity == 26:
            return np.ones((2 * r + 1,) * 3, dtype=bool)
        z, y, x = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
        return (np.abs(z) + np.abs(y) + np.abs(x)) <= r


def erode(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Keep a voxel iff the whole element around it is foreground (outside the grid counts as background)."""
    m = np.asarray(mask) > 0
    return ndimage.binary_erosion(m, structure=se.array(), border_value=0).astype(np.uint8)


def connected_components(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """IDs 1..K numbered by each component's first voxel in z-major scan order."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=structure)
    if n == 0:
        return labels.astype(np.uint32)
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    order = np.argsort(first[keep], kind="stable")
    lut = np.zeros(n + 1, dtype=np.uint32)
    lut[ids[keep][order]] = np.arange(1, n + 1, dtype=np.uint32)
    return lut[labels]


def baseline_pipeline(mask: np.ndarray, settings: Optional[BaselineSettings] = None, origin: Optional[tuple] = None) -> np.ndarray:
    """erode -> connected components -> seeded fill over the original mask."""
    settings = settings or BaselineSettings()
    m = (np.asarray(mask) > 0).astype(np.uint8)
    se = StructuringElement(settings.erosion_radius, settings.erosion_connectivity)
    eroded = erode(m, se)
    if m.any() and not eroded.any():
        raise DegenerateInputError(
            f"erosion (radius {se.radius}, {se.connectivity}-conn) removed all {int(m.sum())} foreground voxels"
        )
    seeds = connected_components(eroded, settings.cc_connectivity)
    return watershed_fill(seeds, m, origin=origin)
