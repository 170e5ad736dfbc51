"""Command-line entry point: ``bodylift <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import (DatasetFormatError, PoseSample, SynthConfig, h36m_skeleton, load_dataset,
                   load_skeleton, save_dataset, stack2d, synth_dataset)
from .losses import LossWeights
from .metrics import EvalOptions, evaluate, predict_mm
from .selfcheck import format_results, run_selfcheck
from .trainer import TrainConfig, TrainingAborted, train, write_log_csv
from .autodiff import Tensor

log = logging.getLogger("bodylift")

SEED_ENV = "BODYLIFT_SEED"
BUILTIN_SKELETONS = {"h36m16": 16, "h36m17": 17}


class CliError(RuntimeError):
    pass


class UsageError(CliError):
    pass


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def _skeleton(spec: str | None):
    if spec is None:
        return h36m_skeleton(16)
    if spec in BUILTIN_SKELETONS:
        return h36m_skeleton(BUILTIN_SKELETONS[spec])
    return load_skeleton(spec)


def _log_resolved(command: str, resolved: dict) -> None:
    log.info("resolved config [%s]: %s", command, json.dumps(resolved, sort_keys=True, default=str))


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    sk = _skeleton(args.skeleton)
    seed = args.seed if args.seed is not None else _default_seed()
    cfg = SynthConfig()
    if args.actions:
        cfg = SynthConfig(actions=tuple(args.actions.split(",")))
    _log_resolved("synth", {"skeleton": args.skeleton or "h36m16", "count": args.count,
                            "seed": seed, "out": args.out, "actions": list(cfg.actions)})
    samples = synth_dataset(sk, args.count, np.random.default_rng(seed), cfg)
    save_dataset(samples, args.out)
    return 0


def _train_config(args, sk) -> TrainConfig:
    base: dict = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(base) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    weights = dict(vars(LossWeights()))
    if isinstance(base.get("weights"), dict):
        weights.update(base["weights"])
    elif isinstance(base.get("weights"), list):
        weights = vars(LossWeights.from_sequence(base["weights"]))
    if args.lambdas is not None:
        weights = vars(LossWeights.from_sequence(args.lambdas))
    base["weights"] = weights
    overrides = {"mode": args.mode, "epochs": args.epochs, "batch_size": args.batch_size,
                 "lr": args.lr, "width": args.width, "dropout": args.dropout, "seed": args.seed,
                 "lr_decay": args.lr_decay, "patience": args.patience,
                 "reencode_source": args.reencode_source}
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.detach_reencoder:
        base["detach_reencoder"] = True
    base.setdefault("seed", _default_seed())
    base["num_joints"] = sk.num_joints
    base["root_index"] = sk.root_index
    base["joint_set"] = sk.joint_set_id
    base["checkpoint_path"] = args.out_checkpoint
    return TrainConfig(**base)


def cmd_train(args) -> int:
    sk = _skeleton(args.skeleton)
    cfg = _train_config(args, sk)
    if cfg.mode == "semi" and not args.unlabeled:
        raise UsageError("--mode semi requires --unlabeled")
    _log_resolved("train", cfg.to_json())
    labeled = load_dataset(args.labeled, sk.root_index)
    _check_joints(labeled, sk.num_joints, args.labeled)
    val = load_dataset(args.val, sk.root_index) if args.val else None
    unlabeled = load_dataset(args.unlabeled, sk.root_index) if args.unlabeled else None
    result = train(cfg, labeled, val, unlabeled)
    log_path = args.log or str(args.out_checkpoint) + ".log.csv"
    write_log_csv(result.log, log_path)
    if result.best_val_mpjpe is not None:
        log.info("best validation MPJPE %.3f mm at epoch %d", result.best_val_mpjpe, result.best_epoch)
    log.info("wrote %s and %s", args.out_checkpoint, log_path)
    return 0


def _check_joints(samples, J, where) -> None:
    if samples and samples[0].pose2d.shape[0] != J:
        raise CliError(f"{where}: data has {samples[0].pose2d.shape[0]} joints, expected {J}")


def _load_for_data(checkpoint, data_path):
    ck = load_checkpoint(checkpoint)
    samples = load_dataset(data_path, ck.root_index)
    _check_joints(samples, ck.model.spec.num_joints, data_path)
    return ck, samples


def cmd_eval(args) -> int:
    ck, samples = _load_for_data(args.checkpoint, args.data)
    opts = EvalOptions(root_index=ck.root_index, per_action=args.per_action,
                       pck_threshold=args.pck_threshold)
    _log_resolved("eval", {"checkpoint": args.checkpoint, "data": args.data,
                           "protocol": args.protocol, "per_action": args.per_action})
    report = evaluate(ck.model, samples, ck.stats, opts)
    protocols = ["p1", "p2", "pck", "auc"] if args.protocol == "all" else [args.protocol]
    payload = report.to_json()
    payload["protocols"] = protocols
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(report.table(protocols))
    return 0


def cmd_predict(args) -> int:
    ck, samples = _load_for_data(args.checkpoint, args.data)
    _log_resolved("predict", {"checkpoint": args.checkpoint, "data": args.data, "out": args.out})
    pred = predict_mm(ck.model, samples, ck.stats, ck.root_index)
    out = [PoseSample(s.pose2d, p, s.subject, s.action) for s, p in zip(samples, pred)]
    save_dataset(out, args.out)
    return 0


def cmd_export_features(args) -> int:
    ck, samples = _load_for_data(args.checkpoint, args.data)
    model = ck.model
    if not hasattr(model, "encode3d"):
        raise CliError("feature export needs a full model checkpoint (the baseline has no encoders)")
    _log_resolved("export-features", {"checkpoint": args.checkpoint, "data": args.data,
                                      "reencoded": args.reencoded, "out": args.out})
    x2 = Tensor(ck.stats.normalize2d(stack2d(samples)))
    f2d = model.encode2d(x2).data
    labeled = np.array([s.pose3d is not None for s in samples])
    h3d = None
    if labeled.any():
        y3 = np.stack([s.pose3d.reshape(-1) for s in samples if s.pose3d is not None])
        h3d = model.encode3d(Tensor(ck.stats.normalize3d(y3))).data
    h3d_re = model.encode3d(model.generate(x2, Tensor(f2d))).data if args.reencoded else None
    w = f2d.shape[1]
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_id", "source"] + [f"f{i}" for i in range(w)])
        k = 0
        for i in range(len(samples)):
            wr.writerow([i, "2d"] + [repr(v) for v in f2d[i]])
            if labeled[i]:
                wr.writerow([i, "3d"] + [repr(v) for v in h3d[k]])
                k += 1
            if h3d_re is not None:
                wr.writerow([i, "3d-reencoded"] + [repr(v) for v in h3d_re[i]])
    return 0


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(fault=args.inject_fault)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bodylift", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic 2D/3D pose dataset (JSONL)")
    s.add_argument("--skeleton", help="h36m16, h36m17 or a skeleton JSON file")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--actions", help="comma-separated action names to draw from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a lifting model")
    t.add_argument("--mode", choices=["supervised", "semi", "baseline"])
    t.add_argument("--labeled", required=True)
    t.add_argument("--unlabeled")
    t.add_argument("--val")
    t.add_argument("--config", help="JSON file with TrainConfig fields; flags win")
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--log", help="training log CSV (default: <checkpoint>.log.csv)")
    t.add_argument("--skeleton")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--width", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--lambdas", type=float, nargs=5, metavar=("L1", "L2", "L3", "L4", "L5"))
    t.add_argument("--detach-reencoder", action="store_true")
    t.add_argument("--reencode-source", choices=["generator", "decoder"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on labeled data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=["p1", "p2", "pck", "auc", "all"], default="all")
    e.add_argument("--per-action", action="store_true")
    e.add_argument("--pck-threshold", type=float, default=150.0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="lift 2D poses to root-relative 3D (mm)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    x = sub.add_parser("export-features", help="dump latent features for external plotting")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--reencoded", action="store_true", help="also export features of re-encoded predictions")
    x.set_defaults(func=cmd_export_features)

    c = sub.add_parser("selfcheck", help="run the built-in verification battery")
    c.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and (args.mode == "semi") and not args.unlabeled:
        parser.error("--mode semi requires --unlabeled")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bodylift {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CliError, CheckpointError, DatasetFormatError, TrainingAborted,
            FileNotFoundError, PermissionError, IsADirectoryError, ValueError) as exc:
        print(f"bodylift {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
