"""
gradcheck.py — central finite-difference checks for every differentiable op.

What it does:
- numeric_grad: central differences (h = 1e-5) of a scalar function of one array.
- One suite per op (losses, conv3d, batchnorm3d, residual block, full network);
  each reports the worst relative error against its threshold.
- run_gradcheck collects the suites into a pandas table; `corrupt` scales one op's
  analytic gradient so the failure path can be exercised.

Relative error = max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import EmbeddingLossParams, NetworkConfig, tiny_network
from errors import GradientCheckError
from losses import (
    ClusterStats,
    MaskedEmbeddingBatch,
    bce_loss,
    cluster_stats,
    distance_term,
    embedding_loss,
    embedding_loss_map,
    regularization_term,
    semantic_loss,
    variance_term,
)
from network import (
    NetworkState,
    batchnorm3d,
    batchnorm3d_backward,
    conv3d,
    conv3d_backward,
    init_network,
    network_backward,
    network_forward,
    residual_block,
    residual_block_backward,
)

H = 1e-5
CORRUPT_FACTOR = 1.5
Pair = Tuple[np.ndarray, np.ndarray]


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H, indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Perturb `x` in place entry by entry (restored afterwards)."""
    return _differences(f, x, h, indices)[0]


def numeric_grad_with_gap(
    f: Callable[[], float], x: np.ndarray, h: float = H, indices: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences plus |forward slope - backward slope| per entry (large at a ReLU kink)."""
    return _differences(f, x, h, indices, with_gap=True)


def _differences(
    f: Callable[[], float], x: np.ndarray, h: float, indices: Optional[np.ndarray], with_gap: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    gap = np.zeros(len(idx))
    f0 = f() if with_gap else 0.0
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2.0 * h)
        if with_gap:
            gap[k] = abs((fp - f0) - (f0 - fm)) / h
    return out, gap


# ============================================================================
# LOSS SUITES
# ============================================================================
def _clustered_batch(rng: np.random.Generator, n_clusters: int = 3, per: int = 8, dims: int = 4) -> MaskedEmbeddingBatch:
    centers = rng.normal(0.0, 1.0, size=(n_clusters, dims))
    x = np.concatenate([c + rng.normal(0.0, 0.5, size=(per, dims)) for c in centers])
    ids = np.repeat(np.arange(1, n_clusters + 1), per)
    return MaskedEmbeddingBatch(x=x, ids=ids)


def check_bce(rng: np.random.Generator) -> Pair:
    y_hat = rng.uniform(0.05, 0.95, size=(8, 8, 8))
    y = (rng.uniform(size=(8, 8, 8)) > 0.5).astype(np.float64)
    _, g = bce_loss(y_hat, y)
    return g.ravel(), numeric_grad(lambda: bce_loss(y_hat, y)[0], y_hat)


def check_semantic_softmax(rng: np.random.Generator) -> Pair:
    logits = rng.normal(size=(1, 2, 4, 4, 4))
    y = (rng.uniform(size=(1, 4, 4, 4)) > 0.5).astype(np.float64)
    _, d, _ = semantic_loss(logits, y)
    return d.ravel(), numeric_grad(lambda: semantic_loss(logits, y)[0], logits)


def check_variance(rng: np.random.Generator) -> Pair:
    batch = _clustered_batch(rng)
    delta_v = 0.3
    _, dx = variance_term(cluster_stats(batch), batch, delta_v)
    f = lambda: variance_term(cluster_stats(batch), batch, delta_v)[0]  # noqa: E731
    return dx.ravel(), numeric_grad(f, batch.x)


def _stats_for(means: np.ndarray) -> ClusterStats:
    C = means.shape[0]
    return ClusterStats(ids=np.arange(1, C + 1), means=means, counts=np.ones(C, dtype=np.int64), inverse=np.arange(C))


def check_distance(rng: np.random.Generator) -> Pair:
    means = rng.normal(0.0, 1.0, size=(4, 3))
    delta_d = 3.0
    _, dmu = distance_term(_stats_for(means), delta_d)
    return dmu.ravel(), numeric_grad(lambda: distance_term(_stats_for(means), delta_d)[0], means)


def check_regularization(rng: np.random.Generator) -> Pair:
    means = rng.normal(0.0, 1.0, size=(4, 3)) + 0.5
    _, dmu = regularization_term(_stats_for(means))
    return dmu.ravel(), numeric_grad(lambda: regularization_term(_stats_for(means))[0], means)


def check_embedding_loss(rng: np.random.Generator) -> Pair:
    batch = _clustered_batch(rng, n_clusters=3, per=10, dims=16)
    params = EmbeddingLossParams(delta_v=0.5, delta_d=6.0)
    res = embedding_loss(batch, params)
    return res.grad.ravel(), numeric_grad(lambda: embedding_loss(batch, params).total, batch.x)


# ============================================================================
# LAYER SUITES
# ============================================================================
def check_conv3d(rng: np.random.Generator) -> Pair:
    x = rng.normal(size=(1, 2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(1, 3, 5, 5, 5))
    dx, dw, db = conv3d_backward(r, x, w)
    f = lambda: float(np.sum(conv3d(x, w, b) * r))  # noqa: E731
    analytic = np.concatenate([dx.ravel(), dw.ravel(), db])
    numeric = np.concatenate([numeric_grad(f, x), numeric_grad(f, w), numeric_grad(f, b)])
    return analytic, numeric


def check_batchnorm3d(rng: np.random.Generator) -> Pair:
    x = rng.normal(1.0, 2.0, size=(2, 2, 4, 4, 4))
    gamma = rng.uniform(0.5, 1.5, size=2)
    beta = rng.normal(size=2)
    rm, rv = np.zeros(2), np.ones(2)
    r = rng.normal(size=x.shape)
    _, cache, _, _ = batchnorm3d(x, gamma, beta, rm, rv, training=True)
    dx, dg, db = batchnorm3d_backward(r, cache)
    f = lambda: float(np.sum(batchnorm3d(x, gamma, beta, rm, rv, training=True)[0] * r))  # noqa: E731
    analytic = np.concatenate([dx.ravel(), dg, db])
    numeric = np.concatenate([numeric_grad(f, x), numeric_grad(f, gamma), numeric_grad(f, beta)])
    return analytic, numeric


def check_residual_block(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = 2
    x = rng.normal(size=(2, c, 4, 4, 4))
    params = {
        "conv1.w": rng.normal(0.0, 0.3, size=(c, c, 3, 3, 3)), "conv1.b": rng.normal(size=c),
        "bn1.gamma": rng.uniform(0.5, 1.5, size=c), "bn1.beta": rng.normal(size=c),
        "conv2.w": rng.normal(0.0, 0.3, size=(c, c, 3, 3, 3)), "conv2.b": rng.normal(size=c),
        "bn2.gamma": rng.uniform(0.5, 1.5, size=c), "bn2.beta": rng.normal(size=c),
    }
    stats = {
        "bn1.running_mean": np.zeros(c), "bn1.running_var": np.ones(c),
        "bn2.running_mean": np.zeros(c), "bn2.running_var": np.ones(c),
    }
    r = rng.normal(size=x.shape)
    _, cache, _ = residual_block(x, params, stats, training=True)
    dx, grads = residual_block_backward(r, params, cache)
    f = lambda: float(np.sum(residual_block(x, params, stats, training=True)[0] * r))  # noqa: E731
    names = sorted(params)
    analytic = np.concatenate([dx.ravel()] + [grads[k].ravel() for k in names])
    parts = [numeric_grad_with_gap(f, x)] + [numeric_grad_with_gap(f, params[k]) for k in names]
    return analytic, np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# ============================================================================
# FULL NETWORK
# ============================================================================
def network_loss(state: NetworkState, x: np.ndarray, gt: np.ndarray, params: EmbeddingLossParams) -> Tuple[float, Dict[str, np.ndarray]]:
    """BCE on the semantic branch + embedding loss on gt foreground, with all parameter gradients."""
    res = network_forward(state, x, training=True)
    l_sem, d_logits, _ = semantic_loss(res.logits, (gt > 0).astype(np.float64))
    d_emb = np.zeros_like(res.embedding)
    parts = []
    for b in range(x.shape[0]):
        r = embedding_loss_map(res.embedding[b], gt[b], params)
        if r is not None:
            parts.append(r.total)
            d_emb[b] = r.grad
    k = max(len(parts), 1)
    grads, _ = network_backward(state, res, {"semantic": d_logits, "embedding": d_emb / k})
    return l_sem + sum(parts) / k, grads


def check_network(
    rng: np.random.Generator, cfg: Optional[NetworkConfig] = None, per_tensor: int = 3
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled parameter entries of every tensor of a tiny two-branch network."""
    cfg = cfg or tiny_network()
    state = init_network(cfg, seed=int(rng.integers(0, 2**31)))
    t = cfg.tile_size
    x = rng.normal(size=(2, 1, t, t, t))
    gt = rng.integers(0, 4, size=(2, t, t, t)).astype(np.uint32)
    params = EmbeddingLossParams()
    _, grads = network_loss(state, x, gt, params)
    analytic: List[np.ndarray] = []
    numeric: List[np.ndarray] = []
    gaps: List[np.ndarray] = []
    for name in sorted(state.params):
        arr = state.params[name]
        idx = rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False)
        analytic.append(grads[name].reshape(-1)[idx])
        num, gap = numeric_grad_with_gap(lambda: network_loss(state, x, gt, params)[0], arr, indices=idx)
        numeric.append(num)
        gaps.append(gap)
    return np.concatenate(analytic), np.concatenate(numeric), np.concatenate(gaps)


# ============================================================================
# DRIVER
# ============================================================================
@dataclass(frozen=True)
class Suite:
    op: str
    threshold: float
    run: Callable[[np.random.Generator], tuple]


SUITES: Tuple[Suite, ...] = (
    Suite("bce", 1e-6, check_bce),
    Suite("semantic_softmax", 1e-6, check_semantic_softmax),
    Suite("variance", 1e-6, check_variance),
    Suite("distance", 1e-6, check_distance),
    Suite("regularization", 1e-6, check_regularization),
    Suite("embedding_loss", 1e-6, check_embedding_loss),
    Suite("conv3d", 1e-6, check_conv3d),
    Suite("batchnorm3d", 1e-5, check_batchnorm3d),
    Suite("residual_block", 1e-5, check_residual_block),
    Suite("network", 1e-4, check_network),
)
MIN_KEPT = 0.5
REPORT_COLUMNS = ["op", "max_rel_err", "threshold", "checked", "dropped", "passed"]


def compare(analytic: np.ndarray, numeric: np.ndarray, gap: Optional[np.ndarray], threshold: float) -> Tuple[float, int]:
    """(relative error, entries dropped at ReLU kinks).

    An entry whose forward and backward slopes differ by more than the allowed error
    (relative to the largest analytic entry) straddles a kink and is skipped; a kept
    entry is off by at most half its slope gap.
    """
    if gap is None:
        return rel_error(analytic, numeric), 0
    tol = threshold * max(np.abs(analytic).max(initial=0.0), 1e-12)
    keep = gap <= tol
    if keep.mean() < MIN_KEPT:
        return float("inf"), int((~keep).sum())
    return rel_error(analytic[keep], numeric[keep]), int((~keep).sum())


def run_gradcheck(seed: int = 0, corrupt: Optional[str] = None, ops: Optional[List[str]] = None, verbose: bool = True) -> pd.DataFrame:
    """One row per op: op, max_rel_err, threshold, checked, dropped, passed.

    checked + dropped is the number of gradient entries the suite produced; dropped ones
    sat on a kink and were not compared.
    """
    names = {s.op for s in SUITES}
    if corrupt is not None and corrupt not in names:
        raise ValueError(f"unknown op {corrupt!r} to corrupt; choose from {sorted(names)}")
    rows = []
    for i, suite in enumerate(SUITES):
        if ops is not None and suite.op not in ops:
            continue
        rng = np.random.default_rng([seed, i])
        out = suite.run(rng)
        analytic, numeric = out[0], out[1]
        gap = out[2] if len(out) > 2 else None
        if suite.op == corrupt:
            analytic = analytic * CORRUPT_FACTOR
        err, dropped = compare(analytic, numeric, gap, suite.threshold)
        passed = err < suite.threshold
        checked = int(np.size(analytic)) - dropped
        rows.append({
            "op": suite.op, "max_rel_err": err, "threshold": suite.threshold,
            "checked": checked, "dropped": dropped, "passed": passed,
        })
        if verbose:
            mark = "✓" if passed else "✗"
            print(
                f"  {mark} {suite.op:<18} max_rel_err={err:.3e} (< {suite.threshold:.0e})"
                f" checked={checked} dropped={dropped}"
            )
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def assert_passed(report: pd.DataFrame) -> None:
    failed = report.loc[~report["passed"], "op"].tolist()
    if failed:
        raise GradientCheckError(f"gradient check failed for: {', '.join(failed)}")
