"""Command-line pipeline driver.

One subcommand per stage plus `bench`, which runs the whole DAG and the
ablation variants from a single JSON config. Stage parameters live in the
config file; flags cover only the working directory, config path and
--force. Failures print a single machine-parsable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .pipeline import Pipeline, StageError, run_bench

_STAGE_COMMANDS = {
    "ingest": ["data"],
    "synth": ["data"],
    "embed": ["embed"],
    "pairs": ["pairs"],
    "contrast": ["contrast"],
    "tokenize": ["tokenize"],
    "cpt": ["cpt"],
    "sft": ["sft"],
    "em": ["em"],
    "predict": ["predict"],
    "eval": ["eval"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geosid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(_STAGE_COMMANDS) + ["bench"]:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON pipeline config")
        cmd.add_argument("--workdir", default=None, help="artifact directory (default: config.workdir)")
        cmd.add_argument("--force", action="store_true", help="re-run even when hashes match")
    return parser


def _load_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError("config", f"cannot read config {path}: {exc}") from exc


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("GEOSID_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args.config)
        workdir = args.workdir or config.get("workdir")
        if not workdir:
            raise StageError("config", "no workdir: pass --workdir or set config.workdir")
        if args.command == "ingest" and "tsv" not in config.get("data", {}):
            raise StageError("config", "ingest requires config.data.tsv")
        if args.command == "synth" and "synth" not in config.get("data", {}):
            raise StageError("config", "synth requires config.data.synth")
        if args.command == "bench":
            run_bench(config, workdir, force=args.force)
        else:
            Pipeline(config, workdir, force=args.force).run(_STAGE_COMMANDS[args.command])
    except StageError as exc:
        print(json.dumps({"error": str(exc), "stage": exc.stage}), file=sys.stderr)
        return 1
    except Exception as exc:  # condense any stage failure to one line
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}", "stage": args.command}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
