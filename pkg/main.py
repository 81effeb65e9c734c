"""
main.py — fiberseg command line.

What it does:
- generate    -> synthetic phantom (raw, gt, mask) + phantom_stats.json
- train       -> semantic or embedding stage, checkpoint + CSV loss log
- predict     -> embedding or baseline instance labels for one volume
- eval        -> ARI / Dice report for saved labels against ground truth
- compare     -> four-row method comparison (predicted vs true semantics);
               --train-first trains both stages from the config first
- gradcheck   -> finite-difference suites, exit 5 on any failure

Exit codes: 0 ok, 1 other failure, 2 bad config, 3 checkpoint mismatch,
4 unsegmentable tile, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import OUT_DIR, PipelineConfig, config_hash, load_config, save_config, with_overrides
from errors import ConfigError, FiberSegError, VolumeFormatError
from gradcheck import assert_passed, run_gradcheck
from metrics import evaluate_report
from network import check_compatible, load_checkpoint, save_checkpoint, state_checksum
from phantom import generate_phantom, phantom_report
from pipeline import evaluate_prediction, plan_for, run_compare, run_predict
from train import TrainRun, train_embedding, train_semantic, write_train_log
from volume import LabelVolume, ScalarVolume, crop, load_volume, normalize_volume, save_volume


# -----------------------------------------------------------------------------
# Helpers
# -----------------------------------------------------------------------------
def _config(args: argparse.Namespace) -> PipelineConfig:
    return with_overrides(load_config(args.config), seed=args.seed, threads=args.threads)


def _out_dir(args: argparse.Namespace) -> Path:
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _scalar(path: str | Path) -> ScalarVolume:
    vol = load_volume(path)
    if not isinstance(vol, ScalarVolume):
        raise VolumeFormatError(f"{path} holds labels, expected a scalar volume")
    return vol


def _labels(path: str | Path) -> np.ndarray:
    vol = load_volume(path)
    data = vol.data
    if isinstance(vol, ScalarVolume):
        data = np.rint(data).astype(np.uint32)
    return np.asarray(data)


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _load_state(path: str, cfg: PipelineConfig):
    state = load_checkpoint(path)
    check_compatible(state, cfg.network)
    return state


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------
def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    print(f"[1/2] Generating phantom {tuple(cfg.phantom.dims)}, {cfg.phantom.fiber_count} fibers, seed {cfg.phantom.seed}...")
    ph = generate_phantom(cfg.phantom, verbose=True)
    voxel = cfg.tiles.voxel_size_um
    save_volume(out / "raw", ScalarVolume(ph.raw.data.astype(np.float32), voxel))
    save_volume(out / "gt", LabelVolume(ph.gt.data, voxel))
    save_volume(out / "mask", LabelVolume(ph.mask.data, voxel))

    print("[2/2] Writing stats...")
    stats = phantom_report(ph.gt).to_dict()
    stats["config_hash"] = config_hash(cfg)
    _write_json(out / "phantom_stats.json", stats)
    save_config(cfg, out / "config.json")
    print(f"  instances: {stats['count']}")
    print(f"  volume_fraction: {stats['volume_fraction']:.4f}")
    print(f"  out_dir: {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    raw = normalize_volume(_scalar(args.raw or out / "raw")).data
    gt = _labels(args.gt or out / "gt")
    if gt.shape != raw.shape:
        raise VolumeFormatError(f"raw {raw.shape} and gt {gt.shape} differ")
    init = _load_state(args.init, cfg) if args.init else None
    t0 = time.perf_counter()

    if args.stage == "semantic":
        print(f"[1/1] Training semantic branch ({args.iters or cfg.train.iterations_semantic} iterations)...")
        run = train_semantic(raw, gt > 0, cfg.train, cfg.network, state=init, iterations=args.iters)
    else:
        if init is None:
            raise ConfigError("--stage embedding needs --init <semantic checkpoint>")
        print(f"[1/1] Training embedding branch ({args.iters or cfg.train.iterations_embedding} iterations)...")
        run = train_embedding(init, raw, gt, cfg.train, iterations=args.iters)

    _save_run(run, cfg, args.stage, out, Path(args.out) if args.out else None)
    print(f"  elapsed_s: {time.perf_counter() - t0:.1f}")
    return 0


def _save_run(run: TrainRun, cfg: PipelineConfig, stage: str, out: Path, ckpt: Optional[Path] = None) -> Path:
    ckpt = ckpt or out / f"{stage}.ckpt"
    save_checkpoint(run.state, ckpt, extra={"config_hash": config_hash(cfg), "seed": cfg.train.seed})
    log = write_train_log(run.history, out / f"train_{stage}.csv", cfg.train.log_every)
    print(f"  ✓ checkpoint: {ckpt}")
    print(f"  log: {log}")
    print(f"  checksum: {state_checksum(run.state)[:16]}")
    return ckpt


def _train_both(cfg: PipelineConfig, raw: np.ndarray, gt: np.ndarray, out: Path):
    print(f"[train] Semantic branch ({cfg.train.iterations_semantic} iterations)...")
    sem = train_semantic(raw, gt > 0, cfg.train, cfg.network)
    _save_run(sem, cfg, "semantic", out)
    print(f"[train] Embedding branch ({cfg.train.iterations_embedding} iterations)...")
    emb = train_embedding(sem.state, raw, gt, cfg.train)
    _save_run(emb, cfg, "embedding", out)
    return emb.state


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    raw = _scalar(args.input or out / "raw")
    state = _load_state(args.weights, cfg) if args.weights else None
    true_sem = _labels(args.true_semantic) if args.true_semantic else None

    print(f"[1/2] Predicting with method={args.method}...")
    result = run_predict(
        cfg, state, raw,
        method=args.method,
        true_semantic=true_sem,
        air_threshold=args.air_threshold,
        dump_dir=Path(args.dump_embeddings) if args.dump_embeddings else None,
        audit_path=Path(args.audit) if args.audit else None,
    )

    print("[2/2] Writing outputs...")
    labels_path = Path(args.out) if args.out else out / f"labels_{args.method}"
    save_volume(labels_path, LabelVolume(result.labels, raw.voxel_size_um))
    save_volume(labels_path.with_name(labels_path.name + "_semantic"), LabelVolume(result.semantic, raw.voxel_size_um))
    summary = {
        "method": args.method,
        "config_hash": config_hash(cfg),
        "instances": int(len(np.unique(result.labels[result.labels > 0]))),
        "unsegmentable_tiles": [list(o) for o in result.unsegmentable],
        "true_semantic": true_sem is not None,
    }
    if args.gt:
        report = evaluate_prediction(result, _labels(args.gt), cfg)
        summary["evaluation"] = report.to_dict()
        print(f"  mean_ari: {report.mean_ari}")
        print(f"  merged_ari: {report.merged_ari:.4f}")
    _write_json(labels_path.with_name(labels_path.name + "_report.json"), summary)
    print(f"  ✓ labels: {labels_path}.bin ({summary['instances']} instances)")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    gt = _labels(args.gt)
    pred = _labels(args.pred)
    semantic = _labels(args.semantic) if args.semantic else (pred > 0)
    plan = plan_for(gt.shape, cfg)
    tiles = [(o, crop(pred, o, plan.tile_size)) for o in plan.origins]
    report, table = evaluate_report(gt, tiles, pred, semantic, method=args.method, config_hash=config_hash(cfg))
    _write_json(out / "eval_report.json", report.to_dict())
    table.to_csv(out / "eval_tiles.csv", index=False)
    for k, v in report.to_dict().items():
        print(f"  {k}: {v}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    raw = _scalar(args.input or out / "raw")
    gt = _labels(args.gt or out / "gt")
    if args.weights:
        state = _load_state(args.weights, cfg)
    elif args.train_first:
        state = _train_both(cfg, normalize_volume(raw).data, gt, out)
    else:
        raise ConfigError("compare needs --weights <embedding checkpoint> or --train-first")
    comparison = run_compare(cfg, state, raw, gt, air_threshold=args.air_threshold)
    print("")
    print(comparison.table.to_string(index=False))
    comparison.table.to_csv(out / "compare.csv", index=False)
    _write_json(
        out / "compare.json",
        {"config_hash": config_hash(cfg), "rows": {k: r.to_dict() for k, r in comparison.reports.items()}},
    )
    print(f"\n  ✓ report: {out / 'compare.json'}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = _config(args)
    print(f"[1/1] Finite-difference gradient checks (seed {cfg.seed})...")
    report = run_gradcheck(seed=cfg.seed, corrupt=args.corrupt, ops=args.ops)
    out = _out_dir(args)
    report.insert(0, "config_hash", config_hash(cfg))
    report.to_csv(out / "gradcheck.csv", index=False)
    assert_passed(report)
    print(f"  ✓ all {len(report)} ops within threshold")
    return 0


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, help="PipelineConfig JSON (defaults if omitted)")
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--threads", type=int, default=None)
    shared.add_argument("--out-dir", default=OUT_DIR)

    parser = argparse.ArgumentParser(prog="fiberseg", description="3D fiber instance segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[shared], help="write a synthetic phantom")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[shared], help="train one stage")
    p.add_argument("--stage", choices=["semantic", "embedding"], required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--out", default=None, help="checkpoint path to write")
    p.add_argument("--raw", default=None)
    p.add_argument("--gt", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[shared], help="segment one volume")
    p.add_argument("--weights", default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--method", choices=["embedding", "baseline"], default="embedding")
    p.add_argument("--true-semantic", default=None, help="binary mask replacing the semantic prediction")
    p.add_argument("--air-threshold", type=float, default=None)
    p.add_argument("--dump-embeddings", default=None, help="directory for per-tile embedding CSVs")
    p.add_argument("--audit", default=None, help="merge audit JSON path")
    p.add_argument("--gt", default=None, help="evaluate against this ground truth")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[shared], help="score saved labels")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--semantic", default=None)
    p.add_argument("--method", default="embedding")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[shared], help="embedding vs baseline report")
    p.add_argument("--weights", default=None)
    p.add_argument("--train-first", action="store_true", help="train both stages from the config before comparing")
    p.add_argument("--input", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--air-threshold", type=float, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient suites")
    p.add_argument("--ops", nargs="*", default=None)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FiberSegError as e:
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
