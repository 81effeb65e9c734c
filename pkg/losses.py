"""
losses.py — training objectives with analytic gradients.

What it does:
- bce_loss: voxel-wise binary cross entropy on foreground probabilities.
- semantic_loss: BCE pushed back through the 2-channel softmax to the logits.
- Discriminative embedding loss on ground-truth foreground voxels:
    variance term   pulls members within delta_v of their instance mean
    distance term   pushes instance means at least delta_d apart
    regularization  keeps instance means near the origin
  The returned embedding gradient treats every mean as a function of its
  members (full chain rule).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from config import EmbeddingLossParams
from volume import BACKGROUND, OUTLIER

EPS_PROB = 1e-7


# ============================================================================
# SEMANTIC
# ============================================================================
def bce_loss(y_hat: np.ndarray, y: np.ndarray, eps: float = EPS_PROB) -> Tuple[float, np.ndarray]:
    """Mean BCE and its gradient w.r.t. y_hat (zero where the clamp is active)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"bce_loss shape mismatch: y_hat {y_hat.shape} vs y {y.shape}")
    p = np.clip(y_hat, eps, 1.0 - eps)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    grad = (-y / p + (1.0 - y) / (1.0 - p)) / n
    grad[(y_hat <= eps) | (y_hat >= 1.0 - eps)] = 0.0
    return float(loss), grad


def semantic_loss(logits: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """BCE of softmax foreground channel. logits (B,2,D,H,W), y (B,D,H,W).

    Returns (loss, d_logits, foreground probability).
    """
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    fg = p[:, 1]
    loss, g = bce_loss(fg, y)
    s = g * p[:, 1] * p[:, 0]
    d_logits = np.stack([-s, s], axis=1)
    return loss, d_logits, fg


# ============================================================================
# EMBEDDING
# ============================================================================
@dataclass
class MaskedEmbeddingBatch:
    """Foreground points: x (N, D) embeddings with instance id per point."""

    x: np.ndarray
    ids: np.ndarray
    index: Tuple[np.ndarray, ...] | None = None

    @property
    def num_instances(self) -> int:
        return int(np.unique(self.ids).size)


@dataclass
class ClusterStats:
    ids: np.ndarray        # (C,) instance ids, ascending
    means: np.ndarray      # (C, D)
    counts: np.ndarray     # (C,)
    inverse: np.ndarray    # (N,) cluster row of each point

    @property
    def C(self) -> int:
        return int(self.ids.size)


@dataclass
class EmbeddingLossResult:
    total: float
    l_v: float
    l_d: float
    l_r: float
    grad: np.ndarray


def masked_embedding_batch(embedding: np.ndarray, gt: np.ndarray) -> MaskedEmbeddingBatch:
    """Collect the embedding vectors of gt foreground voxels. embedding: (D, d, h, w)."""
    if embedding.shape[1:] != gt.shape:
        raise ValueError(f"embedding {embedding.shape} not aligned with labels {gt.shape}")
    fg = (gt != BACKGROUND) & (gt != OUTLIER)
    index = np.nonzero(fg)
    x = embedding[(slice(None),) + index].T
    return MaskedEmbeddingBatch(x=np.ascontiguousarray(x, dtype=np.float64), ids=gt[index], index=index)


def cluster_stats(batch: MaskedEmbeddingBatch) -> ClusterStats:
    x = np.asarray(batch.x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"cluster_stats needs a non-empty (N, D) batch, got {x.shape}")
    ids, inverse, counts = np.unique(batch.ids, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((ids.size, x.shape[1]))
    np.add.at(sums, inverse, x)
    return ClusterStats(ids=ids, means=sums / counts[:, None], counts=counts, inverse=inverse)


def variance_term(stats: ClusterStats, batch: MaskedEmbeddingBatch, delta_v: float) -> Tuple[float, np.ndarray]:
    """(L_v, dL_v/dx)."""
    x = batch.x
    r = stats.means[stats.inverse] - x
    dist = np.linalg.norm(r, axis=1)
    hinge = np.maximum(dist - delta_v, 0.0)
    w = 1.0 / (stats.C * stats.counts[stats.inverse])
    loss = float(np.sum(w * hinge ** 2))

    safe = np.where(dist > 0, dist, 1.0)
    g = (2.0 * w * hinge / safe)[:, None] * r
    g[hinge == 0] = 0.0
    # d/dx_j = -g_j + (sum of g over j's cluster) / N_c
    dmu = np.zeros_like(stats.means)
    np.add.at(dmu, stats.inverse, g)
    dx = -g + (dmu / stats.counts[:, None])[stats.inverse]
    return loss, dx


def distance_term(stats: ClusterStats, delta_d: float) -> Tuple[float, np.ndarray]:
    """(L_d, dL_d/dmu) over ordered pairs; 0 when fewer than two instances."""
    C = stats.C
    if C < 2:
        return 0.0, np.zeros_like(stats.means)
    diff = stats.means[:, None, :] - stats.means[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    hinge = np.maximum(delta_d - dist, 0.0)
    np.fill_diagonal(hinge, 0.0)
    w = 1.0 / (C * (C - 1))
    loss = float(w * np.sum(hinge ** 2))

    safe = np.where(dist > 0, dist, 1.0)
    coef = np.where(dist > 0, hinge / safe, 0.0)
    # both (A,B) and (B,A) contribute to mu_A
    dmu = -4.0 * w * np.einsum("ab,abd->ad", coef, diff)
    return loss, dmu


def regularization_term(stats: ClusterStats) -> Tuple[float, np.ndarray]:
    """(L_r, dL_r/dmu); subgradient 0 at the origin."""
    norms = np.linalg.norm(stats.means, axis=1)
    loss = float(norms.mean())
    safe = np.where(norms > 0, norms, 1.0)
    dmu = np.where((norms > 0)[:, None], stats.means / safe[:, None], 0.0) / stats.C
    return loss, dmu


def embedding_loss(batch: MaskedEmbeddingBatch, params: EmbeddingLossParams) -> EmbeddingLossResult:
    stats = cluster_stats(batch)
    l_v, dx_v = variance_term(stats, batch, params.delta_v)
    l_d, dmu_d = distance_term(stats, params.delta_d)
    l_r, dmu_r = regularization_term(stats)
    total = params.alpha * l_v + params.beta * l_d + params.gamma * l_r
    dmu = params.beta * dmu_d + params.gamma * dmu_r
    grad = params.alpha * dx_v + (dmu / stats.counts[:, None])[stats.inverse]
    return EmbeddingLossResult(total=float(total), l_v=l_v, l_d=l_d, l_r=l_r, grad=grad)


def embedding_loss_map(
    embedding: np.ndarray, gt: np.ndarray, params: EmbeddingLossParams
) -> EmbeddingLossResult | None:
    """Loss on one tile's gt foreground; grad is scattered back to (D, d, h, w). None if no foreground."""
    batch = masked_embedding_batch(embedding, gt)
    if batch.x.shape[0] == 0:
        return None
    res = embedding_loss(batch, params)
    full = np.zeros_like(embedding, dtype=np.float64)
    full[(slice(None),) + batch.index] = res.grad.T
    res.grad = full
    return res
