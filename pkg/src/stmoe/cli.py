"""Command-line entry point.

Subcommands: gen-data, train, eval, predict, bench, export-attn.
Exit codes: 0 success, 2 configuration error, 3 data/file error,
4 numeric failure.  Any flag default can be overridden with an
environment variable named STMOE_<FLAG> (e.g. STMOE_SEED=7); explicit
flags always win.  Every run writes a JSON manifest of its fully
resolved configuration next to its primary output.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .data import (
    MotionFileError,
    SplitManifest,
    generate_synthetic,
    make_windows,
    read_motion,
    write_motion,
)
from .inference import NumericFailure, PredictionRequest, SweepSpec, bench_inference, predict
from .metrics import MAE_HORIZONS, EvalResult, write_eval_csv
from .model import ConfigError, ModelConfig
from .training import (
    NanLossError,
    TrainConfig,
    evaluate,
    load_model_from_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ENV_PREFIX = "STMOE_"
HORIZON = 24


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic motion dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--sequences", type=int, default=256)
    p.add_argument("--length", type=int, default=160, help="frames per sequence")
    p.add_argument("--joints", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=120,
                   help="model input window the data must accommodate")
    p.add_argument("--dump-config", action="store_true")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--ffn", choices=["dense", "moe"], default="dense")
    p.add_argument("--experts", type=int, default=None)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--embed", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--opt", choices=["sgd", "adam", "noamopt"], default="noamopt")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=120)
    p.add_argument("--lr", type=float, default=1e-3, help="base lr for sgd/adam")
    p.add_argument("--warmup", type=int, default=4000, help="noamopt warmup steps")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--stride", type=int, default=1, help="training window stride")
    p.add_argument("--dump-config", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--degrees", action="store_true", help="report MAE in degrees")
    p.add_argument("--out-csv", default=None, help="write the per-frame error curve as CSV")
    p.add_argument("--dump-config", action="store_true")

    p = sub.add_parser("predict", help="autoregressively extend a motion file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="seed motion file")
    p.add_argument("--out", required=True, help="output motion file")
    p.add_argument("--horizon", type=int, default=HORIZON)
    p.add_argument("--dump-config", action="store_true")

    p = sub.add_parser("bench", help="dense-vs-MoE inference-time sweep")
    p.add_argument("--sweep-dense", type=_int_list, default=(64, 128, 256, 512, 1024, 2048))
    p.add_argument("--sweep-experts", type=_int_list, default=(2, 4, 8, 16, 32))
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--windows", type=int, default=8)
    p.add_argument("--expert-hidden", type=int, default=192)
    p.add_argument("--multi-threaded", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-config", action="store_true")

    p = sub.add_parser("export-attn", help="dump attention and routing weights as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="motion file to probe")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dump-config", action="store_true")

    return parser


def apply_env_overrides(parser: argparse.ArgumentParser) -> None:
    """Let STMOE_<DEST> environment variables replace flag defaults."""
    stack = [parser]
    while stack:
        current = stack.pop()
        for action in current._actions:
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(action.choices.values())
                continue
            if action.dest in ("help", "command"):
                continue
            raw = os.environ.get(ENV_PREFIX + action.dest.upper().replace("-", "_"))
            if raw is None:
                continue
            if isinstance(action, argparse._StoreTrueAction):
                action.default = raw.lower() in ("1", "true", "yes")
            elif action.type is not None:
                action.default = action.type(raw)
            else:
                action.default = raw


def write_run_manifest(target_dir, command: str, resolved: dict) -> None:
    target_dir = Path(target_dir)
    target_dir.mkdir(parents=True, exist_ok=True)
    path = target_dir / f"{command.replace('-', '_')}_run_config.json"
    path.write_text(json.dumps(resolved, indent=2, default=str) + "\n")


def _resolved(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "dump_config"}


def _maybe_dump(args) -> bool:
    if args.dump_config:
        print(json.dumps(_resolved(args), indent=2, default=str))
        return True
    return False


def _seed_window_from_file(path, cfg: ModelConfig) -> np.ndarray:
    seq = read_motion(path)
    if seq.frames.shape[1:] != (cfg.num_joints, cfg.joint_dim):
        raise ConfigError(
            f"{path}: joints/dims {seq.frames.shape[1:]} do not match the model "
            f"({cfg.num_joints}, {cfg.joint_dim})"
        )
    if len(seq) < cfg.input_window:
        raise MotionFileError(
            f"{path}: {len(seq)} frames < model window {cfg.input_window}"
        )
    return seq.frames[-cfg.input_window :]


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.length < args.window + HORIZON:
        raise ConfigError(
            f"--length {args.length} is below the minimum {args.window + HORIZON} "
            f"(input window {args.window} + horizon {HORIZON})"
        )
    manifest = generate_synthetic(
        args.out, num_sequences=args.sequences, length=args.length,
        num_joints=args.joints, seed=args.seed,
    )
    write_run_manifest(args.out, "gen-data", _resolved(args))
    print(f"wrote {len(manifest.train)}/{len(manifest.validation)}/{len(manifest.test)} "
          f"train/validation/test sequences")
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def _load_split_windows(data_dir, split: str, input_window: int, stride: int):
    manifest = SplitManifest.load(Path(data_dir) / "manifest.json")
    windows = []
    for seq in manifest.load_sequences(data_dir, split):
        windows.extend(make_windows(seq, input_window, HORIZON, stride))
    return windows


def cmd_train(args) -> int:
    experts = args.experts
    if args.ffn == "moe" and experts is None:
        experts = 4
        print("notice: --ffn moe without --experts; defaulting to 4 experts")
    manifest_path = Path(args.data) / "manifest.json"
    if not manifest_path.exists():
        raise MotionFileError(f"no dataset manifest at {manifest_path}")
    manifest = SplitManifest.load(manifest_path)
    probe = read_motion(Path(args.data) / manifest.train[0])
    num_joints, joint_dim = probe.frames.shape[1], probe.frames.shape[2]

    model_cfg = ModelConfig(
        input_window=args.window,
        num_joints=num_joints,
        joint_dim=joint_dim,
        embed_dim=args.embed,
        num_layers=args.layers,
        num_heads_temporal=args.heads,
        num_heads_spatial=args.heads,
        hidden_dim=args.hidden,
        dropout_rate=args.dropout,
        ffn_kind="soft_moe" if args.ffn == "moe" else "dense",
        num_experts=experts if experts is not None else 4,
        dtype=args.dtype,
    )
    train_cfg = TrainConfig(
        batch_size=args.batch,
        optimizer=args.opt,
        base_lr=args.lr,
        warmup_steps=args.warmup,
        epochs=args.epochs,
        seed=args.seed,
        checkpoint_dir=args.ckpt_dir,
        train_stride=args.stride,
    )
    errors = model_cfg.validation_errors() + train_cfg.validation_errors()
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        raise ConfigError(f"{len(errors)} configuration error(s)")
    if _maybe_dump(args):
        return EXIT_OK

    train_windows = _load_split_windows(args.data, "train", args.window, train_cfg.train_stride)
    val_windows = _load_split_windows(args.data, "validation", args.window, args.window)
    if not train_windows:
        raise MotionFileError(f"dataset at {args.data} yields no training windows")
    write_run_manifest(args.ckpt_dir, "train", _resolved(args))
    result = train(train_windows, val_windows, model_cfg, train_cfg, resume=args.resume, log=print)
    print(f"metrics: {Path(args.ckpt_dir) / 'metrics.csv'}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if _maybe_dump(args):
        return EXIT_OK
    model, _ = load_model_from_checkpoint(args.ckpt)
    windows = _load_split_windows(args.data, args.split, model.cfg.input_window, model.cfg.input_window)
    if not windows:
        raise MotionFileError(f"split {args.split!r} yields no evaluation windows")
    summary = evaluate(model, windows, horizon=HORIZON)
    scale, unit = (180.0 / np.pi, "deg") if args.degrees else (1.0, "rad")
    print(f"split={args.split} windows={summary.num_windows} mse={summary.loss:.6f}")
    for n in MAE_HORIZONS:
        print(f"mae@{n}={summary.mae_at[n] * scale:.6f} {unit}")
    if args.out_csv:
        result = EvalResult(
            per_frame=summary.per_frame,
            mae_at=summary.mae_at,
            selected_joints=np.array([]),
        )
        write_eval_csv(result, args.out_csv)
        print(f"per-frame error curve: {args.out_csv}")
    write_run_manifest(Path(args.data), "eval", _resolved(args))
    return EXIT_OK


def cmd_predict(args) -> int:
    if _maybe_dump(args):
        return EXIT_OK
    model, _ = load_model_from_checkpoint(args.ckpt)
    seed_window = _seed_window_from_file(args.input, model.cfg)
    out_seq = predict(model, PredictionRequest(seed_window=seed_window, horizon=args.horizon))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_motion(out_path, out_seq, dtype=model.cfg.dtype)
    write_run_manifest(out_path.parent, "predict", _resolved(args))
    print(f"wrote {len(out_seq)} predicted frames to {out_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = SweepSpec(
        dense_hidden=tuple(args.sweep_dense),
        moe_experts=tuple(args.sweep_experts),
        moe_expert_hidden=args.expert_hidden,
        reps=args.reps,
        num_windows=args.windows,
        seed=args.seed,
        multi_threaded=args.multi_threaded,
    )
    if _maybe_dump(args):
        return EXIT_OK
    report = bench_inference(spec)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_path)
    report.write_metadata(out_path.with_suffix(".meta.json"))
    write_run_manifest(out_path.parent if str(out_path.parent) != "" else ".", "bench", _resolved(args))
    for row in report.rows:
        print(f"{row.kind:9s} param={row.param:<6d} total_params={row.total_params:<12d} "
              f"seconds={row.seconds:.4f} preds/s={row.preds_per_sec:.1f}")
    print(f"report: {out_path}")
    return EXIT_OK


def cmd_export_attn(args) -> int:
    if _maybe_dump(args):
        return EXIT_OK
    model, _ = load_model_from_checkpoint(args.ckpt)
    seed_window = _seed_window_from_file(args.input, model.cfg)
    output = model.forward(seed_window, collect_records=True)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in output.attention_records:
        for kind, weights in (("temporal", rec.temporal), ("spatial", rec.spatial)):
            # one file per (layer, kind); weights averaged over heads
            mean_w = weights.mean(axis=0)
            path = out_dir / f"attention_layer{rec.layer_index}_{kind}.csv"
            with path.open("w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["row", "col", "weight"])
                for i in range(mean_w.shape[0]):
                    for j in range(mean_w.shape[1]):
                        writer.writerow([i, j, repr(float(mean_w[i, j]))])
    for rec in output.routing_records:
        path = out_dir / f"routing_layer{rec.layer_index}_{rec.path}.csv"
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["token", "slot", "dispatch_weight", "combine_weight"])
            for tok in range(rec.dispatch.shape[0]):
                for slot in range(rec.dispatch.shape[1]):
                    writer.writerow(
                        [tok, slot, repr(float(rec.dispatch[tok, slot])), repr(float(rec.combine[tok, slot]))]
                    )
    write_run_manifest(out_dir, "export-attn", _resolved(args))
    n_files = len(output.attention_records) * 2 + len(output.routing_records)
    print(f"wrote {n_files} CSV files to {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench": cmd_bench,
    "export-attn": cmd_export_attn,
}


def main(argv=None) -> int:
    parser = build_parser()
    apply_env_overrides(parser)
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NanLossError, NumericFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MotionFileError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
