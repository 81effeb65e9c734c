"""
train.py
Two-stage training protocol.

What it does:
- sample_corner / sample_training_tile: uniformly placed training crop, jointly augmented.
- train_semantic: BCE on the semantic branch only.
- train_embedding: copies the semantic trunk into the embedding branch, re-initializes
  its 1^3 head for D channels, and optimizes the discriminative loss on gt foreground
  voxels. The semantic branch is never run or updated in this stage.
- Loss history as a pandas DataFrame; write_train_log keeps every log_every-th row
  plus the final one.

Inputs are expected to be normalized already (see volume.normalize_volume).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import NetworkConfig, TrainConfig
from errors import CheckpointMismatchError, NonFiniteError
from losses import embedding_loss_map, semantic_loss
from network import (
    AdamState,
    NetworkState,
    adam_step,
    init_network,
    network_backward,
    network_forward,
)
from volume import augment, crop

LOG_COLUMNS = ["stage", "iteration", "loss", "l_v", "l_d", "l_r", "elapsed_s"]


@dataclass
class TrainRun:
    state: NetworkState
    history: pd.DataFrame


# ============================================================================
# SAMPLING
# ============================================================================
def sample_corner(dims: Tuple[int, ...], tile_size: int, rng: np.random.Generator) -> Tuple[int, int, int]:
    """Uniform tile corner: each axis independently in [0, dim - tile_size]."""
    return tuple(int(rng.integers(0, d - tile_size + 1)) for d in dims)


def sample_training_tile(
    raw: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    tile_size: int = 32,
    do_augment: bool = True,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(raw tile, label tile, mask tile) from a uniformly random corner."""
    if raw.shape != labels.shape:
        raise ValueError(f"raw {raw.shape} and labels {labels.shape} are not aligned")
    if any(d < tile_size for d in raw.shape):
        raise ValueError(f"volume {raw.shape} is smaller than tile_size {tile_size}")
    origin = sample_corner(raw.shape, tile_size, rng)
    r = crop(raw, origin, tile_size)
    g = crop(labels, origin, tile_size)
    m = (g > 0).astype(np.uint8)
    if do_augment:
        (r, g, m), _ = augment([r, g, m], rng)
    return r, g, m


def _sample_batch(
    raw: np.ndarray, labels: np.ndarray, rng: np.random.Generator, cfg: TrainConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rs, gs, ms = [], [], []
    for _ in range(cfg.batch_size):
        r, g, m = sample_training_tile(raw, labels, rng, cfg.tile_size, cfg.augment)
        rs.append(r)
        gs.append(g)
        ms.append(m)
    return np.stack(rs)[:, None].astype(np.float64), np.stack(gs), np.stack(ms).astype(np.float64)


def _streams(seed: int) -> Tuple[int, np.random.Generator]:
    """Independent init seed and sampling generator derived from one seed."""
    init_ss, sample_ss = np.random.SeedSequence(seed).spawn(2)
    return int(init_ss.generate_state(1)[0]), np.random.default_rng(sample_ss)


def _check_finite(value: float, stage: str, it: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteError(f"{stage} loss became non-finite at iteration {it}: {value}")


def _row(stage: str, it: int, loss: float, t0: float, l_v=np.nan, l_d=np.nan, l_r=np.nan) -> Dict:
    return {
        "stage": stage, "iteration": it, "loss": loss,
        "l_v": l_v, "l_d": l_d, "l_r": l_r, "elapsed_s": time.perf_counter() - t0,
    }


# ============================================================================
# STAGE 1: SEMANTIC
# ============================================================================
def train_semantic(
    raw: np.ndarray,
    mask: np.ndarray,
    cfg: TrainConfig,
    net_cfg: Optional[NetworkConfig] = None,
    state: Optional[NetworkState] = None,
    iterations: Optional[int] = None,
    verbose: bool = True,
) -> TrainRun:
    """Train (or continue training) the semantic branch with BCE."""
    init_seed, rng = _streams(cfg.seed)
    if state is None:
        state = init_network(net_cfg or NetworkConfig(tile_size=cfg.tile_size), seed=init_seed)
    else:
        if state.stage == "embedding":
            raise CheckpointMismatchError("semantic training cannot continue from an embedding-stage checkpoint")
        state = state.copy()
    n_iter = cfg.iterations_semantic if iterations is None else iterations
    opt = AdamState.from_settings(cfg.adam)
    target = (np.asarray(mask) > 0).astype(np.uint8)
    rows: List[Dict] = []
    t0 = time.perf_counter()

    for it in range(1, n_iter + 1):
        x, _, y = _sample_batch(raw, target, rng, cfg)
        res = network_forward(state, x, branches=("semantic",), training=True)
        loss, d_logits, _ = semantic_loss(res.logits, y)
        _check_finite(loss, "semantic", it)
        grads, _ = network_backward(state, res, {"semantic": d_logits})
        adam_step(opt, state.params, grads)
        state.buffers.update(res.buffers)
        rows.append(_row("semantic", it, loss, t0))
        if verbose and (it % cfg.log_every == 0 or it == n_iter):
            print(f"  [semantic {it}/{n_iter}] bce={loss:.4f}")

    state.stage = "semantic"
    state.mode = "eval"
    return TrainRun(state=state, history=pd.DataFrame(rows, columns=LOG_COLUMNS))


# ============================================================================
# STAGE 2: EMBEDDING
# ============================================================================
def transfer_semantic_weights(state: NetworkState, seed: int) -> NetworkState:
    """Copy semantic trunk + blocks (and BN stats) into the embedding branch; fresh D-channel head."""
    out = state.copy()
    for table in (out.params, out.buffers):
        for name in [k for k in table if k.startswith("semantic.") and ".conv_out." not in k]:
            target = "embedding." + name[len("semantic."):]
            if target not in table or table[target].shape != table[name].shape:
                raise CheckpointMismatchError(f"cannot initialize {target} from {name}: shapes differ")
            table[target] = table[name].copy()
    cfg = out.config
    rng = np.random.default_rng(seed)
    fan_in = cfg.trunk_channels
    out.params["embedding.conv_out.w"] = rng.normal(
        0.0, np.sqrt(2.0 / fan_in), size=(cfg.embedding_dims, cfg.trunk_channels, 1, 1, 1)
    )
    out.params["embedding.conv_out.b"] = np.zeros(cfg.embedding_dims)
    return out


def train_embedding(
    init: NetworkState,
    raw: np.ndarray,
    gt: np.ndarray,
    cfg: TrainConfig,
    iterations: Optional[int] = None,
    verbose: bool = True,
) -> TrainRun:
    """Train the embedding branch from a semantic-stage checkpoint (or continue an embedding one)."""
    init_seed, rng = _streams(cfg.seed)
    if init.stage == "semantic":
        state = transfer_semantic_weights(init, init_seed)
    elif init.stage == "embedding":
        state = init.copy()
    else:
        raise CheckpointMismatchError(
            f"embedding training needs a semantic-stage checkpoint, got stage {init.stage!r}"
        )
    n_iter = cfg.iterations_embedding if iterations is None else iterations
    opt = AdamState.from_settings(cfg.adam)
    labels = np.asarray(gt)
    rows: List[Dict] = []
    t0 = time.perf_counter()

    for it in range(1, n_iter + 1):
        x, g, _ = _sample_batch(raw, labels, rng, cfg)
        res = network_forward(state, x, branches=("embedding",), training=True)
        emb = res.embedding
        d_emb = np.zeros_like(emb)
        parts = []
        for b in range(emb.shape[0]):
            r = embedding_loss_map(emb[b], g[b], cfg.loss)
            if r is None:
                continue
            parts.append(r)
            d_emb[b] = r.grad
        if not parts:
            # no foreground in any tile of this batch
            continue
        k = len(parts)
        loss = sum(p.total for p in parts) / k
        _check_finite(loss, "embedding", it)
        grads, _ = network_backward(state, res, {"embedding": d_emb / k})
        adam_step(opt, state.params, grads)
        state.buffers.update(res.buffers)
        rows.append(_row(
            "embedding", it, loss, t0,
            l_v=sum(p.l_v for p in parts) / k,
            l_d=sum(p.l_d for p in parts) / k,
            l_r=sum(p.l_r for p in parts) / k,
        ))
        if verbose and (it % cfg.log_every == 0 or it == n_iter):
            print(f"  [embedding {it}/{n_iter}] loss={loss:.4f} l_v={rows[-1]['l_v']:.4f} l_d={rows[-1]['l_d']:.4f}")

    state.stage = "embedding"
    state.mode = "eval"
    return TrainRun(state=state, history=pd.DataFrame(rows, columns=LOG_COLUMNS))


# ============================================================================
# LOGS
# ============================================================================
def write_train_log(history: pd.DataFrame, path: str | Path, log_every: int) -> Path:
    """CSV with every log_every-th iteration and the final one."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if history.empty:
        history.to_csv(p, index=False)
        return p
    last = history["iteration"].max()
    keep = (history["iteration"] % log_every == 0) | (history["iteration"] == last)
    history[keep].to_csv(p, index=False)
    return p
