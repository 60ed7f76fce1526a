"""Command-line entry point: ``fedlora run | preset | gen-data | pretrain | report``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from fedlora import streams
from fedlora.config import ConfigError, parse_config
from fedlora.data import carve_pretrain_pool, save_dataset
from fedlora.federation import build_dataset, prepare_base, run_experiment
from fedlora.linalg import RngStream
from fedlora.model import save_base
from fedlora.output import OutputError, dump_json, emit_outputs, summary_from_rounds
from fedlora.presets import preset_names, run_preset


def _common(p):
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. federation.rounds=10 (repeatable)")
    p.add_argument("--out", type=Path, help="output directory (default: output_dir from the config)")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedlora", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _common(p)
    p.add_argument("--workers", type=int, default=1, help="threads for concurrent client training")

    p = sub.add_parser("preset", help="run a named preset (all sweep values and seeds)")
    p.add_argument("name", help=f"one of: {', '.join(preset_names())}")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seeds", type=int, nargs="+", help="override the preset's seed list")
    p.add_argument("--out", type=Path, help="output directory (default: runs/<name>)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset and write FVLM-DATA/1")
    _common(p)

    p = sub.add_parser("pretrain", help="build and pretrain the base, write FVLM-BASE/1")
    _common(p)

    p = sub.add_parser("report", help="recompute a summary from a rounds table")
    p.add_argument("rounds_file", type=Path)
    return parser


def _config(args, env):
    return parse_config(args.config, args.overrides, env=env)


def main(argv=None, env=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _config(args, env)
            result = run_experiment(cfg, workers=args.workers)
            bundle = emit_outputs(result, args.out)
            print(f"wrote {bundle.rounds.parent}")
        elif args.command == "preset":
            if args.name not in preset_names():
                parser.print_usage(sys.stderr)
                print(f"fedlora: unknown preset {args.name!r}; choose from {', '.join(preset_names())}", file=sys.stderr)
                return 2
            seeds = args.seeds
            env_seed = (os.environ if env is None else env).get("FEDLORA_SEED")
            if seeds is None and env_seed:
                seeds = [int(env_seed)]
            out = args.out or Path("runs") / args.name
            run_preset(args.name, out, args.overrides, seeds=seeds, workers=args.workers)
            print(f"wrote {out}")
        elif args.command == "gen-data":
            cfg = _config(args, env)
            out = args.out or Path(cfg.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_dataset(build_dataset(cfg, RngStream(cfg.seed)), out / "dataset.fvlm")
            (out / "config.json").write_text(cfg.to_json())
            print(f"wrote {out / 'dataset.fvlm'}")
        elif args.command == "pretrain":
            cfg = _config(args, env)
            out = args.out or Path(cfg.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            root = RngStream(cfg.seed)
            dataset = build_dataset(cfg, root)
            pool, _ = carve_pretrain_pool(dataset, cfg.data.pretrain_fraction, root.child(streams.PARTITION, 0))
            base = prepare_base(cfg, dataset, pool, root)
            save_base(base, out / "base.fvlm")
            (out / "pretrain.json").write_text(dump_json({"checksum": base.checksum(), **base.pretrain_meta}))
            print(f"wrote {out / 'base.fvlm'}")
        elif args.command == "report":
            print(json.dumps(summary_from_rounds(args.rounds_file), indent=2, sort_keys=True))
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"fedlora: config error: {problem}", file=sys.stderr)
        return 2
    except (OutputError, FileNotFoundError, ValueError) as exc:
        print(f"fedlora: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
