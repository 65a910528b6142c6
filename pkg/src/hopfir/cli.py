"""Command-line entry points: train, eval, infer, gradcheck, inspect-attention, synth-data.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
abort during training, 4 gradient-check failure. Every command confines its
writes to the requested output location.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import subprocess
import sys

import numpy as np

from . import tensor as T
from .config import ConfigError, HopFIRConfig, TrainConfig, apply_overrides, config_dict, parse_config, serialize_config
from .data import DataError, load_dataset, stack_samples, synth_poses, write_dataset
from .metrics import pose_loss
from .model import build_model, load_checkpoint, read_checkpoint
from .skeleton import default_skeleton, parse_skeleton_file
from .tensor import Rng, Tensor
from .training import NonFiniteLossError, evaluate, resume_state, train

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _resolve_config(args):
    model_cfg, train_cfg = HopFIRConfig(), TrainConfig()
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config, "r", encoding="utf-8") as fh:
            model_cfg, train_cfg = parse_config(fh.read())
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    apply_overrides(model_cfg, train_cfg, overrides)
    return model_cfg, train_cfg


def _load_graph(args):
    if getattr(args, "skeleton", None):
        return parse_skeleton_file(args.skeleton)
    return default_skeleton()


def _dataset_format(path):
    return "csv" if path.endswith(".csv") else "hfp"


def _load_samples(args, graph):
    if getattr(args, "synth", None):
        return synth_poses(args.synth, args.synth_seed, graph)
    if not getattr(args, "data", None):
        raise DataError("no dataset: pass --data PATH or --synth COUNT")
    if not os.path.exists(args.data):
        raise DataError(f"dataset file not found: {args.data}")
    return load_dataset(args.data, _dataset_format(args.data), expected_joints=graph.num_joints)


def _dtype(args):
    return np.float64 if getattr(args, "f64", False) else np.float32


def _write_manifest(out_dir, model_cfg, train_cfg, args, extra=None):
    manifest = {
        "config": config_dict(model_cfg, train_cfg),
        "seed": model_cfg.seed,
        "git_describe": _git_describe(),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "out_dir": os.path.abspath(out_dir),
        "dtype": "float64" if getattr(args, "f64", False) else "float32",
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args):
    model_cfg, train_cfg = _resolve_config(args)
    graph = _load_graph(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    try:
        samples = _load_samples(args, graph)
        if args.eval_data:
            eval_samples = load_dataset(args.eval_data, _dataset_format(args.eval_data),
                                        expected_joints=graph.num_joints)
        elif args.eval_split > 0:
            split = int(len(samples) * (1.0 - args.eval_split))
            samples, eval_samples = samples[:split], samples[split:]
        else:
            eval_samples = None
    except DataError:
        raise
    data_desc = args.data if args.data else f"synth:{args.synth}:{args.synth_seed}"
    _write_manifest(out_dir, model_cfg, train_cfg, args, extra={"data": data_desc})

    model = build_model(model_cfg, graph, dtype=_dtype(args))
    optimizer, start_epoch = None, 0
    if args.resume:
        _, _, extras = read_checkpoint(args.resume)
        loaded, _, loaded_extras = load_checkpoint(args.resume, graph, dtype=_dtype(args))
        model = loaded
        optimizer, start_epoch = resume_state(loaded_extras, model, train_cfg)
    log = train(model, samples, train_cfg, eval_samples=eval_samples, out_dir=out_dir,
                start_epoch=start_epoch, optimizer=optimizer)
    if log.records:
        last = log.records[-1]
        print(f"trained {len(log.records)} epochs; final loss {last['train_loss']:.6f}"
              + (f", best eval MPJPE {log.best_mpjpe:.3f} mm" if log.best_epoch >= 0 else ""))
    return 0


def cmd_eval(args):
    graph = _load_graph(args)
    model, ckpt_train_cfg, _ = load_checkpoint(args.checkpoint, graph, dtype=_dtype(args))
    if args.config or args.set:
        requested, _ = _resolve_config(args)
        stored, actual = config_dict(requested, ckpt_train_cfg), config_dict(model.config, ckpt_train_cfg)
        diffs = sorted(k for k in stored if stored[k] != actual[k])
        if diffs:
            raise ConfigError(f"checkpoint config differs from requested config in keys: {diffs}")
    samples = _load_samples(args, graph)
    protocols = ("p1",) if args.protocol == "p1" else ("p1", "p2")
    report = evaluate(model, samples, protocols=protocols)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(f"{'metric':<12} {'value':>10}")
    print(f"{'MPJPE':<12} {report.mpjpe_mm:>8.3f} mm")
    if args.protocol != "p1":
        print(f"{'P-MPJPE':<12} {report.p_mpjpe_mm:>8.3f} mm")
    print(f"{'PCK@150':<12} {report.pck_150:>10.4f}")
    print(f"{'AUC':<12} {report.auc:>10.4f}")
    return 0


def cmd_infer(args):
    graph = _load_graph(args)
    model, _, _ = load_checkpoint(args.checkpoint, graph, dtype=_dtype(args))
    samples = _load_samples(args, graph)
    x, _ = stack_samples(samples, dtype=model.dtype)
    pred = model.forward(Tensor(x, dtype=model.dtype), training=False).data
    with open(args.out, "w", encoding="utf-8") as fh:
        for i in range(pred.shape[0]):
            fh.write(json.dumps({"index": i, "joints3d_m": pred[i].tolist()}) + "\n")
    print(f"wrote {pred.shape[0]} predictions to {args.out}")
    return 0


def cmd_gradcheck(args):
    from .gradsuite import run_grad_suite

    model_cfg, _ = _resolve_config(args)
    failures = run_grad_suite(model_cfg, seeds=args.seeds, tolerance=args.tolerance,
                              samples=args.samples, printer=print)
    if failures:
        print(f"FAILED: {len(failures)} layer check(s) above tolerance {args.tolerance:g}")
        return EXIT_GRADCHECK
    print(f"all layer gradients within {args.tolerance:g}")
    return 0


def cmd_inspect_attention(args):
    from .attention_export import export_attention

    graph = _load_graph(args)
    model, _, _ = load_checkpoint(args.checkpoint, graph, dtype=np.float64)
    samples = _load_samples(args, graph)
    if not 0 <= args.sample < len(samples):
        print(f"sample index {args.sample} out of range for {len(samples)} samples", file=sys.stderr)
        return EXIT_DATA
    paths = export_attention(model, samples[args.sample], args.out)
    print(f"wrote {len(paths)} attention matrices under {args.out}")
    return 0


def cmd_synth_data(args):
    graph = _load_graph(args)
    samples = synth_poses(args.count, args.seed if args.seed is not None else 0, graph)
    fmt = args.format or _dataset_format(args.out)
    write_dataset(args.out, samples, fmt=fmt)
    print(f"wrote {len(samples)} samples to {args.out} ({fmt})")
    return 0


# ---------------------------------------------------------------------------


def _add_common(p, out_default=None):
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="K=V", help="config override, repeatable")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", default=out_default, required=out_default is None, help="output location")
    p.add_argument("--f64", action="store_true", help="run in float64 (reproducibility mode)")
    p.add_argument("--skeleton", help="skeleton definition file (default: built-in 16-joint)")


def _add_data(p):
    p.add_argument("--data", help="dataset file (.hfp binary or .csv)")
    p.add_argument("--synth", type=int, metavar="N", help="use N synthetic samples instead of a file")
    p.add_argument("--synth-seed", type=int, default=0, help="seed for --synth")


def build_parser():
    parser = argparse.ArgumentParser(prog="hopfir", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_data(p)
    p.add_argument("--eval-data", help="held-out dataset file")
    p.add_argument("--eval-split", type=float, default=0.0, help="tail fraction held out for eval")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=("p1", "p2", "all"), default="all")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="predict 3D poses for a dataset")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    _add_common(p, out_default=".")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--samples", type=int, default=200, help="coordinates sampled per check")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect-attention", help="export attention matrices for one sample")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.set_defaults(fn=cmd_inspect_attention)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset file")
    _add_common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--format", choices=("hfp", "csv"))
    p.set_defaults(fn=cmd_synth_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.f64:
        T.set_default_dtype(np.float64)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
