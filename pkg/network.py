"""
network.py — resolution-preserving 3D FCN written directly in numpy.

What it does:
- conv3d / batchnorm3d / relu / residual block, each with an explicit backward.
- Two identical branches ("semantic": 2 channels, "embedding": D channels) built as
  conv_in(k3) -> BN -> ReLU -> N residual blocks -> conv_out(k1).
- NetworkState holds parameters and BN running statistics; forward passes are pure
  (updated running stats are returned, not written) so eval-mode inference can be
  shared across threads.
- Adam with bias correction; checkpoint files with a self-describing layer table.

Feature maps are float64 arrays shaped (batch, channels, depth, height, width).
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import AdamSettings, NetworkConfig
from errors import CheckpointMismatchError, DegenerateInputError, NonFiniteError

BRANCHES = ("semantic", "embedding")
Params = Dict[str, np.ndarray]


# ============================================================================
# PRIMITIVE OPS
# ============================================================================
def _offsets(k: int) -> Iterable[Tuple[int, int, int]]:
    for a in range(k):
        for b in range(k):
            for c in range(k):
                yield a, b, c


def _pad_channels_last(x: np.ndarray, p: int) -> np.ndarray:
    """(B, C, D, H, W) -> contiguous zero-padded (B, D+2p, H+2p, W+2p, C)."""
    xl = np.moveaxis(x, 1, -1)
    return np.pad(xl, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))


def _span(dims: Tuple[int, int, int], padded: Tuple[int, ...]) -> int:
    """Flat extent of padded-grid positions that start a window."""
    D, H, W = dims
    _, Hp, Wp = padded
    return (D - 1) * Hp * Wp + (H - 1) * Wp + W


def _im2col(xp: np.ndarray, k: int, dims: Tuple[int, int, int]) -> np.ndarray:
    """Window matrix of one padded channels-last sample: (span, k^3 * C), columns ordered (a, b, c, channel).

    Row i is the window whose corner sits at flat padded index i; a kernel offset is a
    constant flat shift, so every column block is one contiguous slice.
    """
    Dp, Hp, Wp, C = xp.shape
    flat = xp.reshape(-1, C)
    L = _span(dims, (Dp, Hp, Wp))
    cols = np.empty((L, k ** 3 * C))
    for j, (a, b, c) in enumerate(_offsets(k)):
        s = a * Hp * Wp + b * Wp + c
        cols[:, j * C:(j + 1) * C] = flat[s:s + L]
    return cols


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(out, in, k, k, k) -> (k^3 * in, out) matching _im2col columns."""
    return w.transpose(2, 3, 4, 1, 0).reshape(-1, w.shape[0])


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1, same-padded 3D convolution (cross-correlation). w: (out, in, k, k, k)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5D x and w, got {x.shape} and {w.shape}")
    k = w.shape[2]
    if k % 2 == 0 or w.shape[2:] != (k, k, k):
        raise ValueError(f"conv3d kernel must be odd and cubic, got {w.shape[2:]}")
    if x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"conv3d channel mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    B, _, D, H, W = x.shape
    p = k // 2
    xp = _pad_channels_last(x, p)
    Dp, Hp, Wp = xp.shape[1:4]
    L = _span((D, H, W), (Dp, Hp, Wp))
    wm = _kernel_matrix(w)
    # rows past the span and the wrap-around rows are never read back
    y = np.zeros((B, Dp * Hp * Wp, w.shape[0]))
    for i in range(B):
        y[i, :L] = _im2col(xp[i], k, (D, H, W)) @ wm
    y = y.reshape(B, Dp, Hp, Wp, -1)[:, :D, :H, :W] + b
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def conv3d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv3d for upstream gradient dy.

    dx is the same-padded correlation of dy with the spatially flipped, in/out-swapped kernel.
    """
    k = w.shape[2]
    p = k // 2
    B, Cin, D, H, W = x.shape
    Cout = w.shape[0]
    xp = _pad_channels_last(x, p)
    Dp, Hp, Wp = xp.shape[1:4]
    L = _span((D, H, W), (Dp, Hp, Wp))
    dyp = np.zeros((B, Dp, Hp, Wp, Cout))
    dyp[:, :D, :H, :W] = np.moveaxis(dy, 1, -1)
    dyf = dyp.reshape(B, -1, Cout)
    dwm = np.zeros((k ** 3 * Cin, Cout))
    for i in range(B):
        dwm += _im2col(xp[i], k, (D, H, W)).T @ dyf[i, :L]
    dw = dwm.reshape(k, k, k, Cin, Cout).transpose(4, 3, 0, 1, 2)
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dx = conv3d(dy, w_flip, np.zeros(Cin))
    db = dy.sum(axis=(0, 2, 3, 4))
    return dx, np.ascontiguousarray(dw), db


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool


def _bcast(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None, None]


def batchnorm3d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tuple[np.ndarray, BatchNormCache, np.ndarray, np.ndarray]:
    """Per-channel batch norm. Returns (y, cache, new_running_mean, new_running_var)."""
    if training:
        n = x.size // x.shape[1]
        if n <= 1:
            raise DegenerateInputError("batchnorm3d in train mode needs more than one element per channel")
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var * n / (n - 1)
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bcast(mean)) * _bcast(inv_std)
    y = _bcast(gamma) * xhat + _bcast(beta)
    return y, BatchNormCache(xhat, inv_std, gamma, training), new_mean, new_var


def batchnorm3d_backward(dy: np.ndarray, cache: BatchNormCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = (0, 2, 3, 4)
    dgamma = (dy * cache.xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * _bcast(cache.gamma)
    if not cache.training:
        return dxhat * _bcast(cache.inv_std), dgamma, dbeta
    n = dy.size // dy.shape[1]
    dx = _bcast(cache.inv_std / n) * (
        n * dxhat
        - _bcast(dxhat.sum(axis=axes))
        - cache.xhat * _bcast((dxhat * cache.xhat).sum(axis=axes))
    )
    return dx, dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


# ============================================================================
# RESIDUAL BLOCK  (conv -> BN -> ReLU -> conv -> BN, + skip, ReLU)
# ============================================================================
def _sub(d: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def _prefixed(d: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {prefix + k: v for k, v in d.items()}


def residual_block(
    x: np.ndarray,
    params: Params,
    stats: Params,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tuple[np.ndarray, dict, Params]:
    """params/stats use local names: conv1.w, bn1.gamma, bn1.running_mean, ..."""
    if params["conv1.w"].shape[1] != x.shape[1] or params["conv2.w"].shape[0] != x.shape[1]:
        raise ValueError(
            f"residual block needs in == out channels, got x {x.shape[1]}, "
            f"conv1 in {params['conv1.w'].shape[1]}, conv2 out {params['conv2.w'].shape[0]}"
        )
    new_stats: Params = {}
    h1 = conv3d(x, params["conv1.w"], params["conv1.b"])
    n1, bn1, new_stats["bn1.running_mean"], new_stats["bn1.running_var"] = batchnorm3d(
        h1, params["bn1.gamma"], params["bn1.beta"],
        stats["bn1.running_mean"], stats["bn1.running_var"], training, momentum, eps,
    )
    a1 = relu(n1)
    h2 = conv3d(a1, params["conv2.w"], params["conv2.b"])
    n2, bn2, new_stats["bn2.running_mean"], new_stats["bn2.running_var"] = batchnorm3d(
        h2, params["bn2.gamma"], params["bn2.beta"],
        stats["bn2.running_mean"], stats["bn2.running_var"], training, momentum, eps,
    )
    s = n2 + x
    cache = {"x": x, "n1": n1, "a1": a1, "bn1": bn1, "bn2": bn2, "s": s}
    return relu(s), cache, new_stats


def residual_block_backward(dy: np.ndarray, params: Params, cache: dict) -> Tuple[np.ndarray, Params]:
    grads: Params = {}
    ds = relu_backward(dy, cache["s"])
    dh2, grads["bn2.gamma"], grads["bn2.beta"] = batchnorm3d_backward(ds, cache["bn2"])
    da1, grads["conv2.w"], grads["conv2.b"] = conv3d_backward(dh2, cache["a1"], params["conv2.w"])
    dn1 = relu_backward(da1, cache["n1"])
    dh1, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm3d_backward(dn1, cache["bn1"])
    dx, grads["conv1.w"], grads["conv1.b"] = conv3d_backward(dh1, cache["x"], params["conv1.w"])
    return dx + ds, grads


# ============================================================================
# STATE
# ============================================================================
@dataclass
class NetworkState:
    config: NetworkConfig
    params: Params
    buffers: Params
    stage: str = "init"
    mode: str = "eval"

    def copy(self) -> "NetworkState":
        return NetworkState(
            config=self.config.model_copy(),
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            stage=self.stage,
            mode=self.mode,
        )

    def branch_names(self, branch: str) -> List[str]:
        return sorted(k for k in self.params if k.startswith(branch + "."))

    def train(self) -> "NetworkState":
        self.mode = "train"
        return self

    def eval(self) -> "NetworkState":
        self.mode = "eval"
        return self


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _conv_params(rng: np.random.Generator, name: str, cin: int, cout: int, k: int) -> Params:
    return {f"{name}.w": _he_normal(rng, (cout, cin, k, k, k)), f"{name}.b": np.zeros(cout)}


def _bn_params(name: str, ch: int) -> Tuple[Params, Params]:
    return (
        {f"{name}.gamma": np.ones(ch), f"{name}.beta": np.zeros(ch)},
        {f"{name}.running_mean": np.zeros(ch), f"{name}.running_var": np.ones(ch)},
    )


def init_branch(cfg: NetworkConfig, branch: str, out_channels: int, rng: np.random.Generator) -> Tuple[Params, Params]:
    t = cfg.trunk_channels
    params: Params = {}
    buffers: Params = {}
    params.update(_conv_params(rng, f"{branch}.conv_in", cfg.in_channels, t, 3))
    p, s = _bn_params(f"{branch}.bn_in", t)
    params.update(p)
    buffers.update(s)
    for i in range(cfg.blocks_per_branch):
        blk = f"{branch}.block{i}"
        params.update(_conv_params(rng, f"{blk}.conv1", t, t, 3))
        p, s = _bn_params(f"{blk}.bn1", t)
        params.update(p)
        buffers.update(s)
        params.update(_conv_params(rng, f"{blk}.conv2", t, t, 3))
        p, s = _bn_params(f"{blk}.bn2", t)
        params.update(p)
        buffers.update(s)
    params.update(_conv_params(rng, f"{branch}.conv_out", t, out_channels, 1))
    return params, buffers


def init_network(cfg: NetworkConfig, seed: int = 0) -> NetworkState:
    rng = np.random.default_rng(seed)
    params: Params = {}
    buffers: Params = {}
    for branch, out in (("semantic", cfg.semantic_out), ("embedding", cfg.embedding_dims)):
        p, s = init_branch(cfg, branch, out, rng)
        params.update(p)
        buffers.update(s)
    return NetworkState(config=cfg, params=params, buffers=buffers)


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================
@dataclass
class ForwardResult:
    outputs: Dict[str, np.ndarray]
    tapes: Dict[str, list] = field(default_factory=dict)
    buffers: Params = field(default_factory=dict)

    @property
    def logits(self) -> Optional[np.ndarray]:
        return self.outputs.get("semantic")

    @property
    def embedding(self) -> Optional[np.ndarray]:
        return self.outputs.get("embedding")


def branch_forward(
    state: NetworkState, branch: str, x: np.ndarray, training: bool
) -> Tuple[np.ndarray, list, Params]:
    cfg = state.config
    P = state.params
    S = state.buffers
    m, eps = cfg.bn_momentum, cfg.bn_eps
    tape: list = []
    new_stats: Params = {}

    h = conv3d(x, P[f"{branch}.conv_in.w"], P[f"{branch}.conv_in.b"])
    n, bn, rm, rv = batchnorm3d(
        h, P[f"{branch}.bn_in.gamma"], P[f"{branch}.bn_in.beta"],
        S[f"{branch}.bn_in.running_mean"], S[f"{branch}.bn_in.running_var"], training, m, eps,
    )
    new_stats[f"{branch}.bn_in.running_mean"] = rm
    new_stats[f"{branch}.bn_in.running_var"] = rv
    a = relu(n)
    tape.append(("stem", x, n, bn))

    for i in range(cfg.blocks_per_branch):
        pre = f"{branch}.block{i}."
        y, cache, stats = residual_block(a, _sub(P, pre), _sub(S, pre), training, m, eps)
        new_stats.update(_prefixed(stats, pre))
        tape.append(("block", pre, cache))
        a = y

    out = conv3d(a, P[f"{branch}.conv_out.w"], P[f"{branch}.conv_out.b"])
    tape.append(("head", a))
    return out, tape, new_stats


def branch_backward(state: NetworkState, branch: str, tape: list, dout: np.ndarray) -> Tuple[np.ndarray, Params]:
    P = state.params
    grads: Params = {}
    _, a = tape[-1]
    da, grads[f"{branch}.conv_out.w"], grads[f"{branch}.conv_out.b"] = conv3d_backward(
        dout, a, P[f"{branch}.conv_out.w"]
    )
    for entry in reversed(tape[1:-1]):
        _, pre, cache = entry
        da, g = residual_block_backward(da, _sub(P, pre), cache)
        grads.update(_prefixed(g, pre))
    _, x, n, bn = tape[0]
    dn = relu_backward(da, n)
    dh, grads[f"{branch}.bn_in.gamma"], grads[f"{branch}.bn_in.beta"] = batchnorm3d_backward(dn, bn)
    dx, grads[f"{branch}.conv_in.w"], grads[f"{branch}.conv_in.b"] = conv3d_backward(
        dh, x, P[f"{branch}.conv_in.w"]
    )
    return dx, grads


def as_batch(tile: np.ndarray, cfg: NetworkConfig) -> np.ndarray:
    """Accept (D,H,W), (C,D,H,W) or (B,C,D,H,W); check channels and tile size."""
    x = np.asarray(tile, dtype=np.float64)
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input with {cfg.in_channels} channel(s), got shape {np.shape(tile)}")
    if x.shape[2:] != (cfg.tile_size,) * 3:
        raise ValueError(f"network expects {cfg.tile_size}^3 tiles, got {x.shape[2:]}")
    return x


def network_forward(
    state: NetworkState,
    tile: np.ndarray,
    branches: Sequence[str] = BRANCHES,
    training: Optional[bool] = None,
) -> ForwardResult:
    """Run the requested branches. Running-stat updates are returned in result.buffers."""
    x = as_batch(tile, state.config)
    training = state.mode == "train" if training is None else training
    result = ForwardResult(outputs={})
    for branch in branches:
        out, tape, stats = branch_forward(state, branch, x, training)
        result.outputs[branch] = out
        result.tapes[branch] = tape
        result.buffers.update(stats)
    return result


def network_backward(
    state: NetworkState, result: ForwardResult, douts: Dict[str, np.ndarray]
) -> Tuple[Params, Optional[np.ndarray]]:
    """Parameter gradients for every branch present in `douts` (plus summed input gradient)."""
    grads: Params = {}
    dx_total = None
    for branch, dout in douts.items():
        dx, g = branch_backward(state, branch, result.tapes[branch], dout)
        grads.update(g)
        dx_total = dx if dx_total is None else dx_total + dx
    return grads, dx_total


def softmax_foreground(logits: np.ndarray) -> np.ndarray:
    """Foreground probability (channel 1) of a 2-channel softmax; shape (B, D, H, W)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def predict_tile(state: NetworkState, tile: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode (foreground probability (D,H,W), embedding (D_emb, D,H,W)) for one tile."""
    res = network_forward(state, tile, training=False)
    return softmax_foreground(res.logits)[0], res.embedding[0]


# ============================================================================
# OPTIMIZER
# ============================================================================
@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def from_settings(cls, s: AdamSettings) -> "AdamState":
        return cls(lr=s.lr, beta1=s.beta1, beta2=s.beta2, eps=s.eps)


def adam_step(opt: AdamState, params: Params, grads: Params) -> Params:
    """In-place Adam update of every parameter that has a gradient."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k} at step {opt.t + 1}")
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for k, g in grads.items():
        if k not in opt.m:
            opt.m[k] = np.zeros_like(params[k])
            opt.v[k] = np.zeros_like(params[k])
        opt.m[k] *= opt.beta1
        opt.m[k] += (1.0 - opt.beta1) * g
        opt.v[k] *= opt.beta2
        opt.v[k] += (1.0 - opt.beta2) * (g * g)
        params[k] -= opt.lr * (opt.m[k] / bc1) / (np.sqrt(opt.v[k] / bc2) + opt.eps)
    return params


# ============================================================================
# CHECKPOINTS
# ============================================================================
MAGIC = b"FIBERNET"
ARCH_FIELDS = ("in_channels", "trunk_channels", "blocks_per_branch", "embedding_dims", "semantic_out", "tile_size")


def save_checkpoint(state: NetworkState, path: str | Path, extra: Optional[dict] = None) -> Path:
    """MAGIC | u64 header length | JSON header (config, stage, layer table) | f64 payload."""
    layers = []
    chunks = []
    offset = 0
    for kind, table in (("param", state.params), ("buffer", state.buffers)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f8")
            layers.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "format": 1,
        "dtype": "f64",
        "stage": state.stage,
        "config": state.config.model_dump(mode="json"),
        "layers": layers,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    return p


def read_checkpoint_header(path: str | Path) -> Tuple[dict, int]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointMismatchError(f"{path} is not a fiberseg checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path: str | Path) -> NetworkState:
    header, start = read_checkpoint_header(path)
    payload = Path(path).read_bytes()[start:]
    params: Params = {}
    buffers: Params = {}
    for layer in header["layers"]:
        end = layer["offset"] + layer["nbytes"]
        if end > len(payload):
            raise CheckpointMismatchError(f"{path}: truncated payload at layer {layer['name']}")
        arr = np.frombuffer(payload[layer["offset"]:end], dtype="<f8").reshape(layer["shape"]).astype(np.float64)
        (params if layer["kind"] == "param" else buffers)[layer["name"]] = arr
    cfg = NetworkConfig.model_validate(header["config"])
    state = NetworkState(config=cfg, params=params, buffers=buffers, stage=header.get("stage", "init"))
    expected = init_network(cfg)
    if set(expected.params) != set(params) or any(expected.params[k].shape != params[k].shape for k in params):
        raise CheckpointMismatchError(f"{path}: layer table does not match its own config")
    return state


def check_compatible(state: NetworkState, cfg: NetworkConfig) -> None:
    """Raise CheckpointMismatchError when the checkpoint architecture differs from cfg."""
    diffs = [
        f"{k}: checkpoint={getattr(state.config, k)} config={getattr(cfg, k)}"
        for k in ARCH_FIELDS
        if getattr(state.config, k) != getattr(cfg, k)
    ]
    if diffs:
        raise CheckpointMismatchError("checkpoint does not match config (" + "; ".join(diffs) + ")")


def state_checksum(state: NetworkState, branch: Optional[str] = None) -> str:
    """SHA-256 over parameter and running-stat bytes (optionally one branch only)."""
    h = hashlib.sha256()
    for table in (state.params, state.buffers):
        for name in sorted(table):
            if branch is not None and not name.startswith(branch + "."):
                continue
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(table[name], dtype="<f8").tobytes())
    return h.hexdigest()


def clone_state(state: NetworkState) -> NetworkState:
    return copy.deepcopy(state)
