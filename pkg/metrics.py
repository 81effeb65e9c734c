"""
metrics.py
Clustering agreement and mask overlap scores.

What it does:
- adjusted_rand_index: exact-integer contingency sums, one final division.
- dice: overlap of two binary masks.
- tile_aris / evaluate_report: mean per-tile ARI, merged ARI, Dice and instance counts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import MetricError
from volume import BACKGROUND, OUTLIER


def _pairs(counts: np.ndarray) -> int:
    """Sum of C(c, 2) in Python ints."""
    return sum(int(c) * (int(c) - 1) // 2 for c in counts.tolist())


def contingency(gt: np.ndarray, pred: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(m_ij counts, row sums, column sums) over paired label arrays."""
    _, gi = np.unique(gt, return_inverse=True)
    _, pj = np.unique(pred, return_inverse=True)
    gi = gi.reshape(-1)
    pj = pj.reshape(-1)
    table = np.zeros((gi.max() + 1, pj.max() + 1), dtype=np.int64)
    np.add.at(table, (gi, pj), 1)
    return table, table.sum(axis=1), table.sum(axis=0)


def adjusted_rand_index(gt: np.ndarray, pred: np.ndarray, eval_mask: Optional[np.ndarray] = None) -> float:
    """ARI over voxels in eval_mask (default: gt foreground)."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise MetricError(f"gt {gt.shape} and pred {pred.shape} are not aligned")
    if eval_mask is None:
        eval_mask = gt != BACKGROUND
    sel = np.asarray(eval_mask, dtype=bool)
    n = int(sel.sum())
    if n < 2:
        raise MetricError(f"ARI needs at least 2 evaluated voxels, got {n}")
    table, rows, cols = contingency(gt[sel], pred[sel])
    index = _pairs(table.ravel())
    t1 = _pairs(rows)
    t2 = _pairs(cols)
    total = n * (n - 1) // 2
    expected = Fraction(t1 * t2, total)
    denom = Fraction(t1 + t2, 2) - expected
    if denom == 0:
        return 1.0
    return float((index - expected) / denom)


def dice(gt_mask: np.ndarray, pred_mask: np.ndarray) -> float:
    a = np.asarray(gt_mask) > 0
    b = np.asarray(pred_mask) > 0
    if a.shape != b.shape:
        raise MetricError(f"masks {a.shape} and {b.shape} are not aligned")
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def count_instances(labels: np.ndarray) -> int:
    ids = np.unique(labels)
    return int(((ids != BACKGROUND) & (ids != OUTLIER)).sum())


# ============================================================================
# REPORT
# ============================================================================
@dataclass
class EvalReport:
    mean_ari: Optional[float]
    merged_ari: float
    dice: float
    n_tiles: int
    n_skipped_tiles: int
    gt_instances: int
    pred_instances: int
    method: str
    config_hash: str

    def to_dict(self) -> Dict:
        return asdict(self)


def tile_aris(
    gt: np.ndarray, tiles: Sequence[Tuple[Tuple[int, int, int], np.ndarray]]
) -> pd.DataFrame:
    """ARI of each (origin, local labels) tile against the gt crop, on that crop's gt foreground."""
    rows: List[Dict] = []
    for origin, labels in tiles:
        box = tuple(slice(o, o + s) for o, s in zip(origin, labels.shape))
        g = gt[box]
        n = int((g != BACKGROUND).sum())
        ari = adjusted_rand_index(g, labels) if n >= 2 else np.nan
        rows.append({"z": origin[0], "y": origin[1], "x": origin[2], "fg_voxels": n, "ari": ari, "skipped": n < 2})
    return pd.DataFrame(rows, columns=["z", "y", "x", "fg_voxels", "ari", "skipped"])


def evaluate_report(
    gt: np.ndarray,
    tiles: Sequence[Tuple[Tuple[int, int, int], np.ndarray]],
    merged: np.ndarray,
    semantic_pred: np.ndarray,
    method: str = "embedding",
    config_hash: str = "",
) -> Tuple[EvalReport, pd.DataFrame]:
    """Report plus the per-tile table it was computed from."""
    table = tile_aris(gt, tiles)
    scored = table.loc[~table["skipped"], "ari"]
    report = EvalReport(
        mean_ari=float(scored.mean()) if len(scored) else None,
        merged_ari=adjusted_rand_index(gt, merged),
        dice=dice(gt != BACKGROUND, semantic_pred),
        n_tiles=int(len(table)),
        n_skipped_tiles=int(table["skipped"].sum()),
        gt_instances=count_instances(gt),
        pred_instances=count_instances(merged),
        method=method,
        config_hash=config_hash,
    )
    return report, table
