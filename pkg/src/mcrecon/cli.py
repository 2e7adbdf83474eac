"""Command-line entry point.

    mcrecon run --preset overlap --seed 0 --output out/
    mcrecon generate --config run.ini
    mcrecon eval --output out/ --stage track

Exit codes: 0 success, 2 configuration error, 3 runtime or optimisation
failure, 4 I/O or file-format error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import FormatError, InvalidConfig, McrError
from .presets import PRESETS

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mcrecon")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--output", type=Path, help="override run.output_dir")
    p.add_argument("--preset", choices=PRESETS, help="override run.preset")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="mcrecon", description="Multi-camera tracking and depth refinement on synthetic scenes.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="render the ground-truth bundle")
    sub.add_parser("track", parents=[common], help="run multi-camera tracking on a bundle")
    sub.add_parser("refine", parents=[common], help="two-phase refinement of tracked outputs")
    ev = sub.add_parser("eval", parents=[common], help="score a stage against ground truth")
    ev.add_argument("--stage", default="refine", choices=("track", "refine"))
    sub.add_parser("run", parents=[common], help="generate, track, refine and eval")
    st = sub.add_parser("stats", parents=[common], help="PLY clouds per timestamp and graph statistics")
    st.add_argument("--stage", default="refine", choices=("gt", "track", "refine"))
    return parser


def resolve_config(args):
    """Config file, else the bundle's echoed config, else defaults; then CLI overrides."""
    path = args.config
    if path is None and args.output is not None and (args.output / "config.ini").exists() and args.command != "run":
        path = args.output / "config.ini"
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.output is not None:
        overrides["run.output_dir"] = str(args.output)
    if args.preset is not None:
        overrides["run.preset"] = args.preset
    return load_config(path, **overrides)


def _run(args):
    cfg = resolve_config(args)
    if args.command == "generate":
        return pipeline.cmd_generate(cfg)
    if args.command == "track":
        return pipeline.cmd_track(cfg)
    if args.command == "refine":
        return pipeline.cmd_refine(cfg)
    if args.command == "eval":
        return pipeline.cmd_eval(cfg, args.stage)
    if args.command == "run":
        return pipeline.cmd_run(cfg)
    return pipeline.cmd_stats(cfg, args.stage)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (McrError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, sort_keys=True, default=pipeline._json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
