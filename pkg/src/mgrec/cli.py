"""Command-line entry point: ``mgrec <synth|quantize|train|eval|report|ablate>``.

Exit codes: 0 success, 1 invalid config or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .formats import FormatError

log = logging.getLogger("mgrec")

COMMANDS = ("synth", "quantize", "train", "eval", "report", "ablate", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgrec", description="Multimodal generative recommendation experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--out", help="output root (overrides config 'out')")
    parser.add_argument("--force", action="store_true", help="recompute existing artifacts")
    parser.add_argument("--unconstrained", action="store_true", help="decode without the catalog trie")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set quant.codebook_size=64 (repeatable)")
    parser.add_argument("--strategy", action="append", help="limit to these strategies (repeatable)")
    parser.add_argument("--axis", choices=sorted(pipeline.ABLATION_AXES), help="ablation axis")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(args: argparse.Namespace):
    overrides = list(args.overrides)
    if args.unconstrained:
        overrides.append("eval.constrained=false")
    cfg = pipeline.load_config(args.config, overrides, seed=args.seed, out=args.out)
    strategies = args.strategy
    if strategies:
        for s in strategies:
            pipeline.parse_strategy(s, cfg.modalities)
    cmd = args.command
    if cmd == "synth":
        return [str(p) for p in pipeline.cmd_synth(cfg, args.force)]
    if cmd == "quantize":
        return pipeline.cmd_quantize(cfg, strategies, args.force)
    if cmd == "train":
        return pipeline.cmd_train(cfg, strategies, args.force)
    if cmd == "eval":
        reports = pipeline.cmd_eval(cfg, strategies, args.force)
        return {f"{name}/{seed}": r["metrics"] for (name, seed), r in reports.items()}
    if cmd == "report":
        return pipeline.cmd_report(cfg)["comparison"]
    if cmd == "run":
        return pipeline.run_pipeline(cfg, args.force)["comparison"]
    if args.axis is None:
        raise pipeline.ConfigError("ablate requires --axis (id_length or codebook_size)")
    return pipeline.cmd_ablate(cfg, args.axis, force=args.force)["rows"]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        result = run(args)
    except (pipeline.ConfigError, pipeline.MissingArtifactError, FormatError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # divergence, numerical failure, I/O
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 2
    if result is not None:
        json.dump(result, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
