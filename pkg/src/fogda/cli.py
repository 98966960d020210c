"""Command-line entry point.

Subcommands: synth | train | eval | dehaze | ablate | config. Every run is
driven by a JSON config file; flags override config values, and FOGDA_SEED
overrides every seed. Exit codes: 0 success, 2 config or usage error,
3 I/O error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from .evaluation import MetricsReport, evaluate
from .fog import dcp_defog
from .models import load_checkpoint
from .scenes import FogDataset, read_png, synthesize_dataset, write_png
from .tensor import NumericalAbort
from .training import protocol_tag, train

EVAL_SPLITS = ("test_target", "test_clear")
ABLATION_ROWS = [
    ("da_only", {"deb": False, "cst": False, "rec": False, "pl": False}),
    ("da_deb", {"deb": True, "cst": False, "rec": False, "pl": False}),
    ("da_deb_cst", {"deb": True, "cst": True, "rec": False, "pl": False}),
    ("da_deb_cst_rec", {"deb": True, "cst": True, "rec": True, "pl": False}),
    ("full", {"deb": True, "cst": True, "rec": True, "pl": True}),
]


def _load_config(args) -> cfg.RunConfig:
    run_config = cfg.load_file(args.config) if args.config else cfg.RunConfig()
    for name in ("data_dir", "run_dir"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(run_config.paths, name, str(value))
    if getattr(args, "protocol", None) is not None:
        if args.protocol not in ("da", "source_only"):
            raise cfg.ConfigError(f"unknown protocol {args.protocol!r}")
        run_config.protocol = args.protocol
    if getattr(args, "iterations", None) is not None:
        run_config.train.iterations = args.iterations
    if getattr(args, "seed", None) is not None:
        run_config.scene.seed = args.seed
        run_config.train.seed = args.seed
    return cfg.resolve(run_config)


def _prepare_run_dir(run_dir: Path, force: bool) -> None:
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise FileExistsError(f"run directory {run_dir} is not empty "
                                  "(pass --force to replace it)")
        if not (run_dir / cfg.LOCK_NAME).exists():
            raise FileExistsError(f"refusing to overwrite {run_dir}: "
                                  f"no {cfg.LOCK_NAME}, not a run directory")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)


def cmd_synth(args) -> int:
    run_config = _load_config(args)
    out_dir = Path(args.out) if args.out else Path(run_config.paths.data_dir)
    manifest = synthesize_dataset(run_config.scene, out_dir, overwrite=args.force)
    summary = {split: len(ids) for split, ids in manifest.splits.items()}
    print(f"dataset written to {out_dir}")
    print(f"  samples: {json.dumps(summary)}")
    print(f"  classes: {manifest.class_names}")
    print(f"  config_hash: {manifest.config_hash}")
    return 0


def cmd_train(args) -> int:
    run_config = _load_config(args)
    dataset = FogDataset(run_config.paths.data_dir)
    run_dir = Path(run_config.paths.run_dir)
    _prepare_run_dir(run_dir, args.force)
    run_config.save(run_dir / cfg.LOCK_NAME)

    params, _ema, log = train(run_config.train, dataset, run_dir=run_dir)

    final_split = "test_target"
    tag = protocol_tag(run_config.protocol, final_split)
    metrics = evaluate(params, dataset, final_split, protocol=tag)
    metrics.save(run_dir / "metrics.json")
    print(f"run written to {run_dir}")
    print(f"  iterations: {run_config.train.iterations}  protocol: {tag}")
    print(f"  final mAP@0.5 on {final_split}: {metrics.map:.4f}")
    if log and "map" in log[-1]:
        print(f"  last periodic mAP: {log[-1]['map']:.4f}")
    return 0


def _checkpoint_path(path: Path, ema: bool) -> Path:
    if ema and path.name.startswith("ckpt_"):
        return path.with_name("ema_" + path.name[len("ckpt_"):])
    return path


def cmd_eval(args) -> int:
    if args.split not in EVAL_SPLITS:
        raise cfg.ConfigError(f"--split must be one of {EVAL_SPLITS}, got {args.split!r}")
    path = _checkpoint_path(Path(args.checkpoint), args.ema)
    params, header = load_checkpoint(path)
    trained_as = header.get("protocol", "da")
    if trained_as == "da" and args.split == "test_clear":
        raise cfg.ConfigError(
            "protocol/split mismatch: an adapted checkpoint evaluates on "
            "test_target; test_clear is reserved for source_only checkpoints")
    dataset = FogDataset(args.data_dir)
    tag = protocol_tag(trained_as, args.split)
    metrics = evaluate(params, dataset, args.split, protocol=tag)
    out = Path(args.out) if args.out else path.parent.parent / "metrics.json"
    metrics.save(out)
    print(f"checkpoint: {path} (iteration {header['iteration']}, "
          f"{'ema' if header.get('ema') else 'student'})")
    print(f"  protocol: {tag}  split: {args.split}")
    print(f"  mAP@0.5: {metrics.map:.4f}")
    print(f"  per-class: {json.dumps(metrics.per_class_ap, sort_keys=True)}")
    print(f"  written: {out}")
    return 0


def cmd_dehaze(args) -> int:
    image = read_png(args.image_in)
    defogged, _t, airlight = dcp_defog(image)
    write_png(args.image_out, defogged)
    print(f"defogged {args.image_in} -> {args.image_out} "
          f"(airlight {np.round(airlight, 4).tolist()})")
    return 0


def cmd_ablate(args) -> int:
    run_config = _load_config(args)
    if run_config.protocol != "da":
        raise cfg.ConfigError("ablation rows are adaptation variants; "
                              "protocol must be 'da'")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    except ValueError:
        raise cfg.ConfigError(f"--seeds must be comma-separated integers, "
                              f"got {args.seeds!r}") from None
    if not seeds:
        raise cfg.ConfigError("--seeds must name at least one seed")

    dataset = FogDataset(run_config.paths.data_dir)
    out_dir = Path(args.out) if args.out else Path(run_config.paths.run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    table = {"iterations": run_config.train.iterations, "seeds": seeds, "rows": []}
    for row_name, toggles in ABLATION_ROWS:
        row = {"name": row_name, "toggles": dict(toggles), "per_seed": {}, "mean": None}
        maps = []
        for seed in seeds:
            row_config = cfg.from_dict(run_config.to_dict())
            cfg.resolve(row_config)
            row_config.train.seed = seed
            row_config.scene.seed = run_config.scene.seed
            for key, value in toggles.items():
                setattr(row_config.train, key, value)
            run_dir = out_dir / f"{row_name}_seed{seed}"
            try:
                _prepare_run_dir(run_dir, force=True)
                row_config.save(run_dir / cfg.LOCK_NAME)
                params, _ema, _log = train(row_config.train, dataset, run_dir=run_dir)
                metrics = evaluate(params, dataset, "test_target", protocol="ablation-row")
                metrics.save(run_dir / "metrics.json")
                row["per_seed"][str(seed)] = metrics.map
                maps.append(metrics.map)
                print(f"{row_name} seed {seed}: mAP {metrics.map:.4f}")
            except (NumericalAbort, OSError, ValueError) as e:
                row["per_seed"][str(seed)] = None
                row["error"] = f"seed {seed}: {e}"
                print(f"{row_name} seed {seed}: FAILED ({e})")
        if maps:
            row["mean"] = float(np.mean(maps))
        table["rows"].append(row)

    out_path = out_dir / "ablation_table.json"
    out_path.write_text(json.dumps(table, indent=1, sort_keys=True))
    print(f"ablation table written to {out_path}")
    return 0


def cmd_config(args) -> int:
    if args.check:
        loaded = cfg.load_file(args.check)
        cfg.resolve(loaded)
        print(f"{args.check}: valid (protocol {loaded.protocol})")
        return 0
    if args.dump_defaults:
        print(json.dumps(cfg.RunConfig().to_dict(), indent=1, sort_keys=True))
        return 0
    raise cfg.ConfigError("config needs --dump-defaults or --check FILE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fogda",
        description="Fog-adaptive detection: synthesize data, train, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, protocol=True):
        p.add_argument("--config", help="JSON run config file")
        p.add_argument("--seed", type=int, help="override scene and train seeds")
        if protocol:
            p.add_argument("--protocol", choices=["da", "source_only"],
                           help="experiment protocol")

    p = sub.add_parser("synth", help="render the four dataset splits")
    add_config_flags(p, protocol=False)
    p.add_argument("--out", help="output dataset directory (default: paths.data_dir)")
    p.add_argument("--force", action="store_true",
                   help="replace an existing dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the training loop")
    add_config_flags(p)
    p.add_argument("--data-dir", help="dataset directory (default: paths.data_dir)")
    p.add_argument("--run-dir", help="output run directory (default: paths.run_dir)")
    p.add_argument("--iterations", type=int, help="override training iterations")
    p.add_argument("--force", action="store_true",
                   help="replace an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--checkpoint", required=True, help="path to ckpt_N.bin")
    p.add_argument("--data-dir", required=True, help="dataset directory")
    p.add_argument("--split", default="test_target",
                   help="evaluation split (test_target or test_clear)")
    p.add_argument("--ema", action="store_true",
                   help="load the EMA weights paired with the checkpoint")
    p.add_argument("--out", help="metrics output path (default: run dir metrics.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dehaze", help="defog one PNG with the dark channel prior")
    p.add_argument("image_in", help="input PNG")
    p.add_argument("image_out", help="output PNG")
    p.set_defaults(func=cmd_dehaze)

    p = sub.add_parser("ablate", help="train and score the five ablation rows")
    add_config_flags(p, protocol=False)
    p.add_argument("--data-dir", help="dataset directory (default: paths.data_dir)")
    p.add_argument("--out", help="output directory (default: paths.run_dir)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.add_argument("--iterations", type=int, help="override training iterations")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("config", help="print defaults or validate a config file")
    p.add_argument("--dump-defaults", action="store_true",
                   help="print the built-in default config as JSON")
    p.add_argument("--check", help="validate a config file and exit")
    p.set_defaults(func=cmd_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except cfg.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 4
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
