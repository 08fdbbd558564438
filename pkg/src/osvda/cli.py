"""Command-line entry point.

    osvda synth       --seed 0 --out data/
    osvda train       --seed 0 --source data/source.jsonl --target data/target.jsonl --out run/
    osvda eval        --checkpoint run/checkpoint --target data/target.jsonl --out run/
    osvda gradcheck   [--configs 20]
    osvda sweep-gamma --checkpoint run/checkpoint --source ... --target ... --out run/

Every command accepts ``--config PATH`` (one JSON document with optional
sections ``synth``, ``model``, ``train``, ``paths``, ``sweep``, ``gradcheck``);
flags override file values. The merged configuration is written to
``<out>/config.json`` and can be fed back through ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .data import (
    SynthConfig,
    attach_ground_truth,
    ground_truth,
    ground_truth_map,
    load_manifest,
    strip_labels,
    synth_dataset,
    write_manifest,
)
from .metrics import pseudo_label_report, evaluate
from .network import ModelDims, load_params, save_params
from .openset import PROTOTYPE, compute_prototypes
from .trainer import TrainConfig, train

log = logging.getLogger("osvda")

MODEL_DEFAULTS = {"H": 64, "F": 64, "P": 32}
SWEEP_DEFAULTS = {"gammas": [round(float(g), 2) for g in np.linspace(-1.0, 1.0, 21)]}
GRADCHECK_DEFAULTS = {"configs": 20, "seed": 0, "eps": 1e-5, "tol": 1e-4}


class CLIError(Exception):
    pass


def default_config() -> dict:
    return {
        "synth": asdict(SynthConfig()),
        "model": dict(MODEL_DEFAULTS),
        "train": asdict(TrainConfig()),
        "paths": {"source": None, "target": None, "ground_truth": None, "checkpoint": None},
        "sweep": dict(SWEEP_DEFAULTS),
        "gradcheck": dict(GRADCHECK_DEFAULTS),
    }


def _merge(base: dict, override: dict, where="config") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise CLIError(f"{where}: unknown key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CLIError(f"{where}.{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def _read_json(path: Path):
    if not path.exists():
        raise CLIError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON ({exc})") from None


def load_config(args) -> dict:
    cfg = default_config()
    if args.config:
        cfg = _merge(cfg, _read_json(Path(args.config)))
    paths = cfg["paths"]
    for key in ("source", "target", "ground_truth", "checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            paths[key] = str(value)
    return cfg


def _build(cls, values: dict):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in values.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid {cls.__name__}: {exc}") from None


def _require(path_value, what) -> Path:
    if not path_value:
        raise CLIError(f"no {what} given")
    path = Path(path_value)
    if not path.exists():
        raise CLIError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_target_with_truth(cfg):
    target_path = _require(cfg["paths"]["target"], "target manifest")
    target = load_manifest(target_path)
    gt = cfg["paths"]["ground_truth"]
    if gt is None:
        sidecar = target_path.with_name(target_path.stem + ".ground_truth.json")
        gt = sidecar if sidecar.exists() else None
    if gt is not None:
        target = attach_ground_truth(target, _read_json(_require(gt, "ground-truth sidecar")))
    return target


def _checkpoint_base(cfg) -> Path:
    value = cfg["paths"]["checkpoint"]
    if not value:
        raise CLIError("no checkpoint given")
    base = Path(value)
    for suffix in (".npy", ".json"):
        if not base.with_suffix(suffix).exists():
            raise CLIError(f"checkpoint not found: {base.with_suffix(suffix)}")
    return base


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    cfg["synth"]["seed"] = args.seed
    config = _build(SynthConfig, cfg["synth"])
    out = _out_dir(args)
    source, target = synth_dataset(config)
    src_path, tgt_path = out / "source.jsonl", out / "target.jsonl"
    write_manifest(source, src_path)
    write_manifest(strip_labels(target), tgt_path)
    _write_json(out / "target.ground_truth.json", ground_truth_map(target))
    cfg["paths"].update(source=str(src_path), target=str(tgt_path))
    _write_json(out / "config.json", cfg)
    print(f"wrote {len(source)} source and {len(target)} target samples to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    cfg["train"]["seed"] = args.seed
    config = _build(TrainConfig, cfg["train"])
    source = load_manifest(_require(cfg["paths"]["source"], "source manifest"))
    # training never sees target ground truth: the manifest is loaded label-blind
    target = strip_labels(load_manifest(_require(cfg["paths"]["target"], "target manifest")))
    # pseudo-label accuracy is logged only when ground truth is available
    try:
        scored = _load_target_with_truth(cfg)
        monitor = all(ground_truth(s) is not None for s in scored)
    except KeyError:
        scored, monitor = None, False
    dims = _build(ModelDims, dict(cfg["model"], D=source.clip_dim, c=source.clips_per_video, K=source.K))
    out = _out_dir(args)
    state = train(source, target, config, dims, monitor=monitor, monitor_target=scored)
    save_params(state.params, out / "checkpoint")
    (out / "history.json").write_text(state.history_json())
    cfg["paths"]["checkpoint"] = str(out / "checkpoint")
    _write_json(out / "config.json", cfg)
    print(f"trained {config.stage1_epochs}+{config.stage2_epochs} epochs; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_eval(args, cfg) -> int:
    params = load_params(_checkpoint_base(cfg))
    target = _load_target_with_truth(cfg)
    report = evaluate(params, target)
    out = _out_dir(args)
    _write_json(out / "metrics.json", report.to_dict())
    print(f"ALL {report.all_acc:.4f}  OS* {report.os_star:.4f}  UNK {report.unk:.4f}  HOS {report.hos:.4f}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    opts = cfg["gradcheck"]
    if args.configs is not None:
        opts["configs"] = args.configs
    if args.seed is not None:
        opts["seed"] = args.seed
    hook = None
    if args.inject_fault:
        scale = args.inject_fault

        def hook(name, grad):
            bad = grad.copy()
            bad[0] = bad[0] * (1 + scale) + scale
            return bad

    results = gc.run_gradcheck(opts["configs"], opts["seed"], opts["eps"], opts["tol"], grad_hook=hook)
    report = [r.to_dict() for r in results]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<13} max rel err {r.max_rel_err:.3e}  ({r.worst_coordinate})")
    if args.out:
        out = _out_dir(args)
        _write_json(out / "gradcheck.json", report)
        _write_json(out / "config.json", cfg)
    return 0 if all(r.passed for r in results) else 1


def cmd_sweep_gamma(args, cfg) -> int:
    """Rejection-threshold sweep on a trained checkpoint.

    For each gamma the target is labelled by prototype rejection plus C's
    closed-set prediction (the training-time labelling rule).
    """
    gammas = args.gammas if args.gammas else cfg["sweep"]["gammas"]
    cfg["sweep"]["gammas"] = [float(g) for g in gammas]
    params = load_params(_checkpoint_base(cfg))
    source = load_manifest(_require(cfg["paths"]["source"], "source manifest"))
    target = _load_target_with_truth(cfg)
    protos = compute_prototypes(params, source)
    records = []
    for g in cfg["sweep"]["gammas"]:
        rep = pseudo_label_report(params, target, g, PROTOTYPE, prototypes=protos)
        records.append(
            {
                "gamma": g,
                "hos": rep.hos,
                "os_star": rep.os_star,
                "unk": rep.unk,
                "all": rep.all_acc,
                "rejection_rate": rep.extra["rejection_rate"],
            }
        )
    out = _out_dir(args)
    _write_json(out / "sweep_gamma.json", records)
    _write_json(out / "config.json", cfg)
    print(json.dumps(records))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osvda", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required=False, out_required=True):
        p.add_argument("--config", type=str, help="JSON configuration file")
        p.add_argument("--seed", type=int, required=seed_required, default=None)
        p.add_argument("--out", type=str, required=out_required, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic source/target split")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run both training stages")
    common(p, seed_required=True)
    p.add_argument("--source")
    p.add_argument("--target")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="open-set metrics of a checkpoint on a target set")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--target")
    p.add_argument("--ground-truth", dest="ground_truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    common(p, out_required=False)
    p.add_argument("--configs", type=int, default=None, help="random configurations per objective")
    p.add_argument("--inject-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-gamma", help="metrics over a grid of rejection thresholds")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--gammas", type=float, nargs="+")
    p.set_defaults(func=cmd_sweep_gamma)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except CLIError as exc:
        print(f"osvda {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"osvda {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
